#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>

#include "kws/dataset.hpp"
#include "kws/synth.hpp"

using namespace kws::dataset;
using kws::Error;

namespace {

Dataset small_synth(size_t phrases, size_t per_phrase, uint64_t seed = 17) {
  kws::frontend::SynthSpec spec;
  spec.num_phrases = phrases;
  spec.utterances_per_phrase = per_phrase;
  spec.frames_per_utterance = 6;
  spec.speaker_count = 2;
  spec.seed = seed;
  return kws::frontend::synth_dataset(spec);
}

}  // namespace

TEST_CASE("manifest parsing") {
  const char* path = "kws_test_manifest.tsv";
  {
    std::ofstream out(path);
    out << "# comment line\n";
    out << "\n";
    out << "u1\thello\tspk0\tclip1.kwsf\n";
    out << "u2\thello\tspk1\tclip2.kwsf\n";
    out << "u3\tworld\tspk0\tclip3.kwsf\n";
  }
  Dataset data = load_manifest(path, /*eager=*/false);
  REQUIRE(data.size() == 3);
  REQUIRE(data[0].id == "u1");
  REQUIRE(data[0].phrase == "hello");
  REQUIRE(data[2].speaker == "spk0");
  REQUIRE(phrase_labels(data) == std::vector<std::string>{"hello", "world"});
  std::remove(path);

  {  // empty file -> empty list
    std::ofstream out(path);
  }
  REQUIRE(load_manifest(path).empty());
  std::remove(path);

  {  // missing column named with its line number
    std::ofstream out(path);
    out << "u1\thello\tspk0\tok.kwsf\n";
    out << "u2\t\tspk0\tok.kwsf\n";
  }
  try {
    load_manifest(path, false);
    FAIL("expected parse error");
  } catch (const Error& e) {
    REQUIRE(std::string(e.what()).find(":2") != std::string::npos);
    REQUIRE(std::string(e.what()).find("phrase") != std::string::npos);
  }
  std::remove(path);

  REQUIRE_THROWS_AS(load_manifest("no_such_manifest.tsv"), Error);
}

TEST_CASE("lazy utterances load on access and unknown extensions fail") {
  Utterance u;
  u.id = "x";
  u.phrase = "p";
  u.speaker = "s";
  u.path = "something.bin";
  REQUIRE_THROWS_AS(u.features(), Error);
}

TEST_CASE("sample_batch: paper-sized batch and parity roles") {
  Dataset data = small_synth(10, 12);
  Batch b = sample_batch(data, 8, 10, 4);
  REQUIRE(b.num_phrases == 8);
  REQUIRE(b.utterances_per == 10);
  REQUIRE(b.enrollment_indices_flat().size() == 40);
  REQUIRE(b.test_indices_flat().size() == 40);

  // parity: 0-based even slots are enrollment (the paper's 1-based odd j)
  for (size_t flat : b.enrollment_indices_flat()) REQUIRE(flat % 2 == 0);
  for (size_t flat : b.test_indices_flat()) REQUIRE(flat % 2 == 1);

  // rows are single-phrase, no utterance repeats anywhere
  std::set<size_t> seen;
  std::set<std::string> phrases;
  for (size_t i = 0; i < b.num_phrases; ++i) {
    const std::string& phrase = data[b.grid[i][0]].phrase;
    phrases.insert(phrase);
    for (size_t idx : b.grid[i]) {
      REQUIRE(data[idx].phrase == phrase);
      REQUIRE(seen.insert(idx).second);
    }
  }
  REQUIRE(phrases.size() == 8);
}

TEST_CASE("sample_batch: minimal batch, determinism, capacity errors") {
  Dataset data = small_synth(3, 4);
  Batch b = sample_batch(data, 2, 2, 9);
  REQUIRE(b.enrollment_indices_flat().size() == 2);
  REQUIRE(b.test_indices_flat().size() == 2);

  Batch b2 = sample_batch(data, 2, 2, 9);
  REQUIRE(b.grid == b2.grid);
  Batch b3 = sample_batch(data, 2, 2, 10);
  REQUIRE(b.grid != b3.grid);

  try {
    sample_batch(data, 4, 4, 1);
    FAIL("expected capacity error");
  } catch (const Error& e) {
    REQUIRE(std::string(e.what()).find("4") != std::string::npos);
  }
  REQUIRE_THROWS_AS(sample_batch(data, 2, 6, 1), Error);   // not enough utterances per phrase
  REQUIRE_THROWS_AS(sample_batch(data, 2, 3, 1), Error);   // odd Y
}

TEST_CASE("make_eval_split partitions each phrase") {
  Dataset data = small_synth(4, 25);
  EvalSplit split = make_eval_split(data, 10, 3);
  REQUIRE(split.phrases.size() == 4);
  for (const auto& ps : split.phrases) {
    REQUIRE(ps.enroll.size() == 10);
    REQUIRE(ps.test.size() == 15);
    std::set<size_t> all(ps.enroll.begin(), ps.enroll.end());
    for (size_t idx : ps.test) REQUIRE(all.insert(idx).second);  // disjoint
    REQUIRE(all.size() == 25);
    for (size_t idx : all) REQUIRE(data[idx].phrase == ps.phrase);
  }

  EvalSplit again = make_eval_split(data, 10, 3);
  for (size_t i = 0; i < split.phrases.size(); ++i) {
    REQUIRE(split.phrases[i].enroll == again.phrases[i].enroll);
    REQUIRE(split.phrases[i].test == again.phrases[i].test);
  }
}

TEST_CASE("make_eval_split boundary: K utterances leaves no test data") {
  Dataset data = small_synth(2, 10);
  try {
    make_eval_split(data, 10, 1);
    FAIL("expected error");
  } catch (const Error& e) {
    REQUIRE(std::string(e.what()).find("phrase_") != std::string::npos);
  }
}

TEST_CASE("split_holdout is a deterministic partition") {
  Dataset data = small_synth(3, 12);
  auto [train, holdout] = split_holdout(data, 5, 8);
  REQUIRE(train.size() == 3 * 7);
  REQUIRE(holdout.size() == 3 * 5);
  auto [train2, holdout2] = split_holdout(data, 5, 8);
  REQUIRE(train.size() == train2.size());
  for (size_t i = 0; i < train.size(); ++i) REQUIRE(train[i].id == train2[i].id);
}
