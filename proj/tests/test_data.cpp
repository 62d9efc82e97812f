#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "mimn/data.hpp"

using namespace mimn;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& content) {
    path = (std::filesystem::temp_directory_path() / name).string();
    std::ofstream out(path);
    out << content;
  }
  ~TempFile() { std::remove(path.c_str()); }
};

const std::vector<std::string> kLabels3 = {"neutral", "entailment", "contradiction"};
const std::vector<std::string> kLabels2 = {"neutral", "entails"};

}  // namespace

TEST_CASE("tokenize lowercases and splits on whitespace") {
  auto toks = tokenize("  The Cat\tsat\n on  MAT ");
  CHECK(toks == std::vector<std::string>{"the", "cat", "sat", "on", "mat"});
  CHECK(tokenize("   ").empty());
}

TEST_CASE("vocabulary reserves special tokens and is a bijection") {
  Vocabulary v;
  CHECK(v.size() == 2);
  CHECK(v.token(Vocabulary::kPad) == "<pad>");
  CHECK(v.token(Vocabulary::kUnk) == "<unk>");
  const int a = v.add("cat");
  CHECK(v.add("cat") == a);
  CHECK(v.lookup("cat") == a);
  CHECK(v.lookup("dog") == Vocabulary::kUnk);
  std::set<std::string> seen;
  for (Index i = 0; i < v.size(); ++i) CHECK(seen.insert(v.token(static_cast<int>(i))).second);
}

TEST_CASE("snli jsonl loader") {
  TempFile f("t_snli.jsonl",
             R"({"gold_label": "entailment", "sentence1": "A dog runs", "sentence2": "An animal moves"})"
             "\n"
             R"({"gold_label": "-", "sentence1": "x", "sentence2": "y"})"
             "\n"
             R"({"gold_label": "contradiction", "sentence1": "A man sleeps", "sentence2": "A man runs"})"
             "\n");
  LoadStats st;
  auto raw = load_raw_dataset(f.path, DataFormat::kSnliJsonl, &st);
  REQUIRE(raw.size() == 2);
  CHECK(st.dropped_unlabeled == 1);
  CHECK(raw[0].label == "entailment");
  CHECK(raw[0].premise == "A dog runs");

  Vocabulary vocab;
  auto ex = to_examples(raw, vocab, kLabels3, true);
  REQUIRE(ex.size() == 2);
  CHECK(ex[0].label == 1);
  CHECK(ex[1].label == 2);
}

TEST_CASE("snli loader reports missing fields with line numbers") {
  TempFile f("t_snli_bad.jsonl", R"({"gold_label": "entailment", "sentence1": "A dog runs"})"
                                 "\n");
  try {
    load_raw_dataset(f.path, DataFormat::kSnliJsonl);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 1") != std::string::npos);
    CHECK(msg.find("sentence2") != std::string::npos);
  }
}

TEST_CASE("scitail tsv loader uses the two-label set") {
  TempFile f("t_scitail.tsv",
             "Plants make food\tPlants are producers\tentails\n"
             "Sky is blue\tGrass grows\tneutral\n");
  auto raw = load_raw_dataset(f.path, DataFormat::kScitailTsv);
  REQUIRE(raw.size() == 2);
  Vocabulary vocab;
  auto ex = to_examples(raw, vocab, kLabels2, true);
  CHECK(ex[0].label == 1);
  CHECK(ex[1].label == 0);
}

TEST_CASE("mpe premises concatenate in file order") {
  TempFile f("t_mpe.tsv", "17\ta one\tb two\tc three\td four\tthe hyp\tentailment\n");
  auto raw = load_raw_dataset(f.path, DataFormat::kMpeTsv);
  REQUIRE(raw.size() == 1);
  CHECK(raw[0].premise == "a one b two c three d four");
  CHECK(raw[0].hypothesis == "the hyp");

  TempFile noid("t_mpe6.tsv", "a\tb\tc\td\thyp\tneutral\n");
  auto raw2 = load_raw_dataset(noid.path, DataFormat::kMpeTsv);
  CHECK(raw2[0].premise == "a b c d");
}

TEST_CASE("unified jsonl supports premise and premises forms") {
  TempFile f("t_unified.jsonl",
             R"({"premise": "a b", "hypothesis": "c", "label": "neutral"})"
             "\n"
             R"({"premises": ["p one", "p two", "p three", "p four"], "hypothesis": "h", "label": "entailment"})"
             "\n");
  auto raw = load_raw_dataset(f.path, DataFormat::kUnifiedJsonl);
  REQUIRE(raw.size() == 2);
  CHECK(raw[1].premise == "p one p two p three p four");
}

TEST_CASE("unknown label string is an error") {
  Vocabulary vocab;
  std::vector<RawExample> raw = {{"a", "b", "maybe"}};
  CHECK_THROWS_AS(to_examples(raw, vocab, kLabels3, true), ParseError);
}

TEST_CASE("empty sentences are skipped with a counter") {
  Vocabulary vocab;
  std::vector<RawExample> raw = {{"a b", "  ", "neutral"}, {"a", "b", "neutral"}};
  LoadStats st;
  auto ex = to_examples(raw, vocab, kLabels3, true, &st);
  CHECK(ex.size() == 1);
  CHECK(st.skipped_empty == 1);
}

TEST_CASE("dataset round-trips through unified jsonl") {
  ToyCorpus corpus = generate_toy_corpus(3, 60);
  const std::string path = (std::filesystem::temp_directory_path() / "t_roundtrip.jsonl").string();
  write_unified_jsonl(path, corpus.train);
  auto reloaded = load_raw_dataset(path, DataFormat::kUnifiedJsonl);
  CHECK(reloaded == corpus.train);

  Vocabulary v1, v2;
  auto e1 = to_examples(corpus.train, v1, kLabels3, true);
  auto e2 = to_examples(reloaded, v2, kLabels3, true);
  CHECK(e1 == e2);
  std::remove(path.c_str());
}

TEST_CASE("make_batches pads, masks and keeps the final partial batch") {
  std::vector<Example> ex;
  for (int i = 0; i < 33; ++i) {
    Example e;
    e.premise = std::vector<int>(static_cast<size_t>(2 + i % 4), 2);
    e.hypothesis = {3, 4};
    e.label = i % 3;
    ex.push_back(e);
  }
  auto batches = make_batches(ex, 32, 7);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].size() == 32);
  CHECK(batches[1].size() == 1);

  // deterministic under the same seed
  auto again = make_batches(ex, 32, 7);
  CHECK(again[0].labels == batches[0].labels);
  CHECK(again[0].premise == batches[0].premise);

  // padding semantics: lengths [3, 5] in one batch
  std::vector<Example> two = {{{2, 2, 2}, {3}, 0}, {{2, 2, 2, 2, 2}, {3}, 1}};
  auto b = make_batches(two, 2, 1);
  REQUIRE(b.size() == 1);
  for (size_t r = 0; r < 2; ++r) {
    CHECK(b[0].premise[r].size() == 5);
    if (b[0].premise_mask[r][3] == 0) {
      CHECK(b[0].premise_mask[r] == std::vector<uint8_t>{1, 1, 1, 0, 0});
      CHECK(b[0].premise[r][4] == Vocabulary::kPad);
    } else {
      CHECK(b[0].premise_mask[r] == std::vector<uint8_t>{1, 1, 1, 1, 1});
    }
  }
}

TEST_CASE("toy corpus obeys its labeling rule and is roughly balanced") {
  ToyCorpus corpus = generate_toy_corpus(11, 600);
  CHECK(corpus.train.size() == 480);
  CHECK(corpus.valid.size() == 60);
  CHECK(corpus.test.size() == 60);

  size_t counts[3] = {0, 0, 0};
  auto tally = [&](const std::vector<RawExample>& part) {
    for (const RawExample& ex : part) {
      const std::string want = toy_label_rule(tokenize(ex.premise), tokenize(ex.hypothesis));
      CHECK(ex.label == want);
      if (ex.label == "neutral") counts[0]++;
      if (ex.label == "entailment") counts[1]++;
      if (ex.label == "contradiction") counts[2]++;
    }
  };
  tally(corpus.train);
  tally(corpus.valid);
  tally(corpus.test);
  for (size_t c : counts) {
    CHECK(static_cast<double>(c) / 600.0 > 0.23);
    CHECK(static_cast<double>(c) / 600.0 < 0.43);
  }

  CHECK_THROWS_AS(generate_toy_corpus(1, 10), ContractError);
}

TEST_CASE("toy rule examples") {
  CHECK(toy_label_rule({"apple", "bear", "cloud"}, {"bear", "apple"}) == "entailment");
  CHECK(toy_label_rule({"apple", "bear"}, {"not", "cloud"}) == "contradiction");
  CHECK(toy_label_rule({"apple", "bear"}, {"apple", "cloud"}) == "neutral");
  CHECK(toy_label_rule({"apple", "bear"}, {"not", "apple"}) == "neutral");
}

TEST_CASE("embedding loader parses, reports oov and zeroes PAD") {
  Vocabulary vocab;
  vocab.add("cat");
  vocab.add("dog");
  vocab.add("rare");

  std::string catline = "cat";
  std::string dogline = "Dog";
  for (int i = 0; i < 4; ++i) {
    catline += " 0." + std::to_string(i + 1);
    dogline += " 0.0" + std::to_string(i + 1);
  }
  TempFile f("t_emb.txt", catline + "\n" + dogline + "\n");

  EmbeddingReport rep;
  Array<double> table = load_embeddings<double>(f.path, vocab, 4, 9, &rep);
  REQUIRE(table.shape() == std::vector<Index>{5, 4});
  CHECK(rep.matched == 2);
  CHECK(rep.oov == 1);  // "rare"
  CHECK(table.at(vocab.lookup("cat"), 0) == 0.1);
  CHECK(table.at(vocab.lookup("cat"), 3) == 0.4);
  CHECK(table.at(vocab.lookup("dog"), 1) == 0.02);  // cased fallback
  for (Index j = 0; j < 4; ++j) CHECK(table.at(Vocabulary::kPad, j) == 0.0);
  // OOV rows are in [-0.05, 0.05] and not all zero
  double mx = 0;
  for (Index j = 0; j < 4; ++j) {
    CHECK(std::fabs(table.at(vocab.lookup("rare"), j)) <= 0.05);
    mx = std::max(mx, std::fabs(table.at(vocab.lookup("rare"), j)));
  }
  CHECK(mx > 0.0);
}

TEST_CASE("embedding loader errors") {
  Vocabulary vocab;
  vocab.add("cat");
  TempFile wrong_dim("t_emb_dim.txt", "cat 0.1 0.2\n");
  CHECK_THROWS_AS(load_embeddings<double>(wrong_dim.path, vocab, 4, 1), DimensionError);

  TempFile bad_line("t_emb_bad.txt", "cat 0.1 0.2 0.3 0.4\ndog 0.1 0.2\n");
  try {
    load_embeddings<double>(bad_line.path, vocab, 4, 1);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  TempFile not_num("t_emb_nan.txt", "cat 0.1 x 0.3 0.4\n");
  CHECK_THROWS_AS(load_embeddings<double>(not_num.path, vocab, 4, 1), ParseError);
}

TEST_CASE("empty embedding file leaves all rows random except PAD") {
  Vocabulary vocab;
  vocab.add("cat");
  TempFile f("t_emb_empty.txt", "");
  EmbeddingReport rep;
  Array<float> table = load_embeddings<float>(f.path, vocab, 3, 5, &rep);
  CHECK(rep.matched == 0);
  CHECK(rep.oov == 1);
  for (Index j = 0; j < 3; ++j) CHECK(table.at(0, j) == 0.0f);
  float mx = 0;
  for (Index j = 0; j < 3; ++j) mx = std::max(mx, std::fabs(table.at(2, j)));
  CHECK(mx > 0.0f);
}

TEST_CASE("embed_tokens gathers rows") {
  Array<double> table({3, 2}, {0, 0, 1, 2, 3, 4});
  Array<double> out = embed_tokens(table, {2, 1, 2});
  CHECK(out.shape() == std::vector<Index>{3, 2});
  CHECK(out.at(0, 0) == 3);
  CHECK(out.at(1, 1) == 2);
  CHECK(out.at(2, 1) == 4);
}
