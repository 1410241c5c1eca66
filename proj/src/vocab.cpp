#include "dapo/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dapo {

namespace {

std::string fold_lower(const std::string& s) {
  std::string r = s;
  std::transform(r.begin(), r.end(), r.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return r;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty())
      throw std::invalid_argument("vocabulary: empty token at line " + std::to_string(i));
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<int>(i));
    if (!inserted)
      throw std::invalid_argument("vocabulary: duplicate token '" + tokens_[i] + "'");
  }
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  std::vector<std::string> all = {kPad, kStart, kEnd, kSlot};
  for (auto& w : words) all.push_back(std::move(w));
  return Vocabulary(std::move(all));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::defaults() {
  std::vector<std::string> words = {
      // semantic anchors
      "normal", "anomaly", "object",
      // caption template
      "a", "photo", "of", "the", "with", "on", "an",
      // object families
      "disk", "square", "triangle", "ring", "cross", "capsule",
      // train-side palette
      "crimson", "emerald", "amber", "teal", "violet", "coral",
      // target-side palette
      "navy", "olive", "salmon", "gold", "indigo", "slate",
      // defect types (train + held-out)
      "scratch", "hole", "stain", "crack", "bent", "missing",
      // extra defect words available for zero-shot registration
      "rust", "dent", "chip", "burn", "tear", "wrinkle", "weird_wick",
      "flattening", "breakage", "particles", "contamination", "spot", "cut",
      // filler adjectives/nouns so the closed vocabulary has realistic breadth
      "surface", "metal", "plastic", "ceramic", "glass", "wood", "fabric",
      "painted", "matte", "glossy", "rough", "smooth", "bright", "dark",
      "small", "large", "thin", "thick", "round", "flat", "sharp", "dull",
      "edge", "corner", "center", "top", "bottom", "left", "right", "side",
      "red", "green", "blue", "yellow", "orange", "purple", "gray", "white",
      "black", "brown", "pink", "cyan", "magenta", "silver", "bronze",
      "part", "piece", "item", "component", "board", "panel", "plate",
      "tube", "wire", "screw", "bolt", "nut", "gear", "lens", "chip_part",
      "good", "bad", "clean", "dirty", "damaged", "intact", "broken",
      "texture", "pattern", "grain", "stripe", "dotted", "solid", "noisy",
      "one", "two", "three", "four", "five", "six", "seven", "eight",
      "industrial", "factory", "product", "sample", "inspection", "camera",
      "image", "picture", "view", "close", "wide", "macro", "detail",
      "background", "foreground", "shadow", "light", "reflection", "blur",
      "is", "has", "shows", "contains", "without", "and", "or", "no",
      "defect", "flaw", "mark", "blemish", "region", "area", "zone",
      "visible", "hidden", "subtle", "severe", "minor", "major", "tiny",
      "deep", "shallow", "long", "short", "curved", "straight", "jagged",
      "circular", "oval", "linear", "branching", "spread", "localized",
      "paint", "coating", "finish", "polish", "weld", "joint", "seam",
      "casting", "molded", "stamped", "machined", "printed", "etched",
  };
  return from_words(std::move(words));
}

Vocabulary Vocabulary::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("vocabulary: cannot open " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("vocabulary: cannot write " + path);
  for (const auto& t : tokens_) out << t << "\n";
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end())
    throw std::runtime_error("unknown token '" + token + "'");
  return it->second;
}

bool Vocabulary::contains(const std::string& token) const {
  return index_.count(token) != 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    throw std::out_of_range("vocabulary id " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
  std::istringstream ss(fold_lower(text));
  std::vector<int> ids;
  std::string word;
  while (ss >> word) ids.push_back(id(word));
  if (ids.empty()) throw std::invalid_argument("tokenize: empty input");
  return ids;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += " ";
    out += token(ids[i]);
  }
  return out;
}

}  // namespace dapo
