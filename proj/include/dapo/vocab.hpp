#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace dapo {

// Closed word-level vocabulary. Token order defines ids; the first four
// entries are the special tokens. Persisted as one token per line.
class Vocabulary {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kStart = "<start>";
  static constexpr const char* kEnd = "<end>";
  static constexpr const char* kSlot = "<slot>";

  // Specials plus the project word list (objects, colors, defects, templates).
  static Vocabulary defaults();
  static Vocabulary from_words(std::vector<std::string> words);  // specials prepended
  static Vocabulary from_tokens(std::vector<std::string> tokens);  // raw order
  static Vocabulary from_file(const std::string& path);          // raw line order
  void save(const std::string& path) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& token) const;  // throws on unknown
  bool contains(const std::string& token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  int pad_id() const { return id(kPad); }
  int start_id() const { return id(kStart); }
  int end_id() const { return id(kEnd); }
  int slot_id() const { return id(kSlot); }

  // Whitespace split after lowercase folding; every word must be known.
  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<int>& ids) const;

 private:
  explicit Vocabulary(std::vector<std::string> tokens);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace dapo
