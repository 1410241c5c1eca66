#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>
#include <vector>

#include "dapo/data.hpp"
#include "dapo/png_io.hpp"
#include "dapo/rng.hpp"

using namespace dapo;
namespace fs = std::filesystem;

namespace {

CorpusSpec small_spec(std::uint64_t seed = 5) {
  CorpusSpec spec = CorpusSpec::defaults();
  spec.train_count = 40;
  spec.target_count = 30;
  spec.seed = seed;
  return spec;
}

bool same_record(const SampleRecord& a, const SampleRecord& b) {
  return a.name == b.name && a.label == b.label && a.object_class == b.object_class &&
         a.defects_present == b.defects_present && a.mask == b.mask &&
         a.image.shape() == b.image.shape() && a.image.data() == b.image.data();
}

std::vector<std::uint8_t> dilate_by_two(const std::vector<std::uint8_t>& sil, int s) {
  std::vector<std::uint8_t> out(sil.size(), 0);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      if (!sil[static_cast<std::size_t>(y * s + x)]) continue;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          int ny = y + dy, nx = x + dx;
          if (ny >= 0 && ny < s && nx >= 0 && nx < s)
            out[static_cast<std::size_t>(ny * s + nx)] = 1;
        }
    }
  return out;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dapo_test_" + tag + "_" +
                                        std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("corpus spec validation") {
  CorpusSpec spec = CorpusSpec::defaults();
  spec.validate();
  CHECK(spec.train_palette.size() == 6);
  CHECK(spec.target_palette.size() == 6);
  // palettes share no color names
  for (const auto& a : spec.train_palette)
    for (const auto& b : spec.target_palette) CHECK(a.name != b.name);
  CHECK(spec.target_defects() ==
        std::vector<std::string>{"scratch", "hole", "stain", "crack", "bent", "missing"});

  CorpusSpec bad = spec;
  bad.unseen_defects.push_back("scratch");
  CHECK_THROWS(bad.validate());
  bad = spec;
  bad.train_count = 0;
  CHECK_THROWS(bad.validate());
  bad = spec;
  bad.anomalous_fraction = 1.5;
  CHECK_THROWS(bad.validate());
  bad = spec;
  bad.target_palette = bad.train_palette;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("object renders cover 30 to 80 percent of the canvas") {
  CorpusSpec spec = CorpusSpec::defaults();
  Rng rng(61);
  for (const auto& shape : spec.object_shapes) {
    for (int trial = 0; trial < 12; ++trial) {
      ObjectParams params{shape, spec.train_palette[trial % 6]};
      RenderedObject obj = render_object(params, 64, rng);
      long inside = std::count(obj.silhouette.begin(), obj.silhouette.end(), 1);
      double frac = static_cast<double>(inside) / (64.0 * 64.0);
      INFO(shape << " trial " << trial << " coverage " << frac);
      CHECK(frac >= 0.30);
      CHECK(frac <= 0.80);
    }
  }
}

TEST_CASE("defects stay inside the dilated silhouette and are visible") {
  CorpusSpec spec = CorpusSpec::defaults();
  Rng rng(62);
  for (const auto& defect : spec.target_defects()) {
    for (int trial = 0; trial < 10; ++trial) {
      ObjectParams params{spec.object_shapes[trial % 6], spec.train_palette[0]};
      RenderedObject obj = render_object(params, 64, rng);
      std::vector<std::uint8_t> region = dilate_by_two(obj.silhouette, 64);
      std::vector<int> px = render_defect(obj, defect, rng);
      CHECK(!px.empty());
      for (int p : px) CHECK(region[static_cast<std::size_t>(p)] == 1);
      if (defect != "bent" && defect != "missing")
        CHECK(static_cast<int>(px.size()) >= 21);  // >= 0.5% of 64x64
    }
  }
  ObjectParams params{"disk", spec.train_palette[0]};
  RenderedObject obj = render_object(params, 64, rng);
  CHECK_THROWS(render_defect(obj, "zeppelin", rng));
}

TEST_CASE("missing regions revert to background statistics") {
  CorpusSpec spec = CorpusSpec::defaults();
  Rng rng(63);
  ObjectParams params{"square", spec.train_palette[1]};
  RenderedObject obj = render_object(params, 64, rng);
  std::vector<int> px = render_defect(obj, "missing", rng);
  REQUIRE(!px.empty());
  double mean = 0.0;
  for (int p : px) {
    for (int c = 0; c < 3; ++c)
      mean += obj.rgb[static_cast<std::size_t>(p * 3 + c)];
  }
  mean /= static_cast<double>(px.size() * 3);
  CHECK(mean > 200.0);  // background sits near 225, objects are saturated colors
  CHECK(mean < 250.0);
}

TEST_CASE("corpus generation is a pure function of the spec") {
  CorpusSpec spec = small_spec();
  GeneratedCorpus a = generate_corpus(spec);
  GeneratedCorpus b = generate_corpus(spec);
  REQUIRE(a.train.size() == 40);
  REQUIRE(a.target.size() == 30);
  for (std::size_t i = 0; i < a.train.size(); ++i)
    CHECK(same_record(a.train[i], b.train[i]));
  for (std::size_t i = 0; i < a.target.size(); ++i)
    CHECK(same_record(a.target[i], b.target[i]));
  REQUIRE(a.captions.size() == a.train.size());
  for (std::size_t i = 0; i < a.captions.size(); ++i)
    CHECK(a.captions[i].second == b.captions[i].second);

  GeneratedCorpus c = generate_corpus(small_spec(6));
  bool any_diff = false;
  for (std::size_t i = 0; i < a.train.size(); ++i)
    if (!same_record(a.train[i], c.train[i])) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("split invariants: defect sets, labels, masks, captions") {
  CorpusSpec spec = small_spec();
  GeneratedCorpus corpus = generate_corpus(spec);
  std::set<std::string> train_set(spec.train_defects.begin(), spec.train_defects.end());
  int train_anomalous = 0;
  for (const auto& rec : corpus.train) {
    // unseen defect types never appear in the training split
    for (const auto& d : rec.defects_present) CHECK(train_set.count(d) == 1);
    bool any = std::any_of(rec.mask.begin(), rec.mask.end(),
                           [](std::uint8_t v) { return v != 0; });
    CHECK(any == (rec.label == 1));
    train_anomalous += rec.label;
    CHECK(rec.image.shape() == Shape{64, 64, 3});
    for (double v : rec.image.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    // mask channel ids stay within the split defect list
    for (std::uint8_t v : rec.mask) CHECK(v <= spec.train_defects.size());
  }
  CHECK(train_anomalous > 5);
  CHECK(train_anomalous < 35);

  bool unseen_used = false;
  auto targets = spec.target_defects();
  for (const auto& rec : corpus.target) {
    for (const auto& d : rec.defects_present)
      CHECK(std::find(targets.begin(), targets.end(), d) != targets.end());
    for (const auto& d : rec.defects_present)
      if (d == "bent" || d == "missing") unseen_used = true;
    for (std::uint8_t v : rec.mask) CHECK(v <= targets.size());
  }
  CHECK(unseen_used);

  for (const auto& [img, caption] : corpus.captions) {
    CHECK(caption.rfind("a photo of a ", 0) == 0);
    CHECK(img.defined());
  }
}

TEST_CASE("one-hot masks are exact and guard the channel count") {
  CorpusSpec spec = small_spec();
  GeneratedCorpus corpus = generate_corpus(spec);
  const SampleRecord* anomalous = nullptr;
  for (const auto& rec : corpus.train)
    if (rec.label) {
      anomalous = &rec;
      break;
    }
  REQUIRE(anomalous != nullptr);
  int channels = static_cast<int>(spec.train_defects.size()) + 1;
  Tensor oh = mask_to_onehot(*anomalous, channels, 64);
  CHECK(oh.shape() == Shape{channels, 64, 64});
  for (int p = 0; p < 64 * 64; ++p) {
    double s = 0.0;
    for (int c = 0; c < channels; ++c) s += oh.at({c, p / 64, p % 64});
    CHECK(s == 1.0);
    int hot = anomalous->mask[static_cast<std::size_t>(p)];
    CHECK(oh.at({hot, p / 64, p % 64}) == 1.0);
  }
  CHECK_THROWS(mask_to_onehot(*anomalous, 1, 64));
  CHECK_THROWS(mask_to_onehot(*anomalous, channels, 32));
}

TEST_CASE("save and load round-trips bit-exactly in lexicographic order") {
  CorpusSpec spec = small_spec();
  GeneratedCorpus corpus = generate_corpus(spec);
  TempDir tmp("roundtrip");
  std::string dir = (tmp.path / "train").string();
  save_split(corpus.train, dir, spec.train_defects);

  CHECK(load_defect_list(dir + "/defects.txt") == spec.train_defects);
  std::vector<SampleRecord> loaded = load_split(dir);
  REQUIRE(loaded.size() == corpus.train.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(same_record(loaded[i], corpus.train[i]));
    if (i) CHECK(loaded[i - 1].name < loaded[i].name);
  }

  // saving twice produces byte-identical files
  std::string dir2 = (tmp.path / "again").string();
  save_split(corpus.train, dir2, spec.train_defects);
  for (const auto& rec : corpus.train) {
    auto bytes = [](const std::string& p) {
      std::ifstream f(p, std::ios::binary);
      REQUIRE(f);
      return std::string(std::istreambuf_iterator<char>(f), {});
    };
    std::string rel = "/masks/" + rec.name + ".png";
    CHECK(bytes(dir + rel) == bytes(dir2 + rel));
    std::string img_rel = "/" + rec.object_class + (rec.label ? "/defect/" : "/good/") +
                          rec.name + ".png";
    CHECK(bytes(dir + img_rel) == bytes(dir2 + img_rel));
  }
}

TEST_CASE("loading rejects a mask that contradicts the stored label") {
  CorpusSpec spec = small_spec();
  GeneratedCorpus corpus = generate_corpus(spec);
  TempDir tmp("tamper");
  std::string dir = (tmp.path / "train").string();
  save_split(corpus.train, dir, spec.train_defects);
  const SampleRecord* anomalous = nullptr;
  for (const auto& rec : corpus.train)
    if (rec.label) {
      anomalous = &rec;
      break;
    }
  REQUIRE(anomalous != nullptr);
  // blank out the stored mask while the meta file still says label 1
  PngImage msk = read_png(dir + "/masks/" + anomalous->name + ".png");
  std::fill(msk.pixels.begin(), msk.pixels.end(), std::uint8_t{0});
  write_png(dir + "/masks/" + anomalous->name + ".png", msk);
  CHECK_THROWS(load_sample(dir, anomalous->name));
  CHECK_THROWS(load_sample(dir, "no_such_sample"));
}

TEST_CASE("palette shift is detectable by a trivial color histogram classifier") {
  CorpusSpec spec = small_spec();
  spec.train_count = 60;
  spec.target_count = 60;
  GeneratedCorpus corpus = generate_corpus(spec);
  double acc = shift_witness_accuracy(corpus.train, corpus.target);
  INFO("witness accuracy " << acc);
  CHECK(acc > 0.9);
  CHECK_THROWS(shift_witness_accuracy({corpus.train[0]}, corpus.target));
}
