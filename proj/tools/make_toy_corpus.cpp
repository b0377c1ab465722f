// Generates the bundled two-class review corpus (label 1 = positive).

#include <array>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bdlab/corpus.hpp"
#include "bdlab/rng.hpp"

namespace {

using bdlab::Rng;

const std::vector<std::string> kSubjects = {
    "the film", "this movie", "the plot", "the cast", "the director's work",
    "the script", "the soundtrack", "the ending", "the story", "the lead",
    "the pacing", "the dialogue", "the camera work", "this sequel",
    "the second act", "the opening scene", "the performances", "the premise",
    "the editing", "the final hour", "the supporting cast", "the screenplay",
    "the villain", "the romance", "the humor", "the action sequences"};

const std::array<std::vector<std::string>, 2> kAdjectives = {{
    {"dull", "tedious", "clumsy", "bland", "lifeless", "muddled", "tiresome",
     "shallow", "predictable", "awkward", "sluggish", "forgettable", "hollow",
     "messy", "flat", "stale", "joyless", "overlong", "confused", "lazy",
     "grating", "pointless", "cheap", "painful", "limp", "derivative",
     "incoherent", "wooden", "bloated", "dreary", "soulless", "disappointing"},
    {"wonderful", "moving", "brilliant", "charming", "gripping", "delightful",
     "heartfelt", "clever", "stunning", "tender", "witty", "luminous",
     "engaging", "powerful", "funny", "warm", "inventive", "assured",
     "graceful", "vivid", "thrilling", "beautiful", "touching", "smart",
     "memorable", "sharp", "lovely", "rich", "fresh", "absorbing", "superb",
     "rewarding"},
}};

const std::array<std::vector<std::string>, 2> kVerdicts = {{
    {"a waste of an evening", "hard to sit through", "a real letdown",
     "not worth the ticket", "a chore to watch", "best skipped",
     "a missed opportunity", "an exercise in patience"},
    {"a joy to watch", "worth every minute", "a real treat",
     "easy to recommend", "a small triumph", "well worth seeing",
     "a pleasure from start to finish", "one to remember"},
}};

const std::vector<std::string> kFillers = {
    "in the second half", "for most of its running time", "despite the budget",
    "at times", "from the first frame", "by the end", "on the whole",
    "in places", "for a summer release", "given the source material",
    "for a debut", "even on a second viewing", "in its quieter moments",
    "compared with the original", "as a family drama", "as a genre piece"};

const std::vector<std::string> kAdverbs = {"quite", "often", "mostly", "rather",
                                           "surprisingly", "genuinely", "oddly",
                                           "consistently"};

double kMixRate = 0.1;
std::size_t kMinSentences = 3;
std::size_t kMaxSentences = 7;

template <class T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.uniform_index(v.size())];
}

std::string sentence(Rng& rng, int polarity) {
  const auto& adj = kAdjectives[polarity];
  switch (rng.uniform_index(6)) {
    case 0:
      return pick(rng, kSubjects) + " is " + pick(rng, adj) + " " + pick(rng, kFillers);
    case 1:
      return pick(rng, kSubjects) + " feels " + pick(rng, kAdverbs) + " " +
             pick(rng, adj) + " and " + pick(rng, adj);
    case 2:
      return "i found " + pick(rng, kSubjects) + " " + pick(rng, adj) + ", " +
             pick(rng, kFillers);
    case 3:
      return "it is " + pick(rng, kVerdicts[polarity]);
    case 4:
      return pick(rng, kFillers) + ", " + pick(rng, kSubjects) + " seems " +
             pick(rng, adj);
    default:
      return "a " + pick(rng, adj) + " turn from " + pick(rng, kSubjects);
  }
}

std::string review(Rng& rng, int label) {
  const std::size_t n =
      kMinSentences + rng.uniform_index(kMaxSentences - kMinSentences + 1);
  std::string text;
  for (std::size_t i = 0; i < n; ++i) {
    // Mixed reviews: some sentences lean the other way.
    const int polarity = rng.uniform01() < kMixRate ? 1 - label : label;
    std::string s = sentence(rng, polarity);
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    if (i > 0) text += ' ';
    text += s + (rng.uniform01() < 0.1 ? "!" : ".");
  }
  return text;
}

bdlab::Dataset make(std::size_t n, double label_noise, Rng& rng) {
  bdlab::Dataset d(2);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    bdlab::TextRecord r;
    r.id = static_cast<bdlab::RecordId>(i);
    r.text = review(rng, label);
    r.label = rng.uniform01() < label_noise ? 1 - label : label;
    r.original_label = r.label;
    d.add(std::move(r));
  }
  return d;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate the toy review corpus"};
  std::filesystem::path out_dir = "data/toy";
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  double label_noise = 0.02;
  std::uint64_t seed = 20240601;
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--train", n_train, "Training records");
  app.add_option("--test", n_test, "Test records");
  app.add_option("--label-noise", label_noise, "Fraction of flipped labels");
  app.add_option("--seed", seed, "Generator seed");
  app.add_option("--min-sentences", kMinSentences, "Shortest review");
  app.add_option("--max-sentences", kMaxSentences, "Longest review");
  app.add_option("--mix-rate", kMixRate, "Chance a sentence leans toward the other class");
  CLI11_PARSE(app, argc, argv);

  try {
    std::filesystem::create_directories(out_dir);
    Rng train_rng(bdlab::derive_seed(seed, "train"));
    Rng test_rng(bdlab::derive_seed(seed, "test"));
    bdlab::save_dataset(make(n_train, label_noise, train_rng), out_dir / "train.jsonl");
    bdlab::save_dataset(make(n_test, 0.0, test_rng), out_dir / "test.jsonl");
  } catch (const std::exception& e) {
    std::cerr << "make_toy_corpus: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
