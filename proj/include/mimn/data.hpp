#pragma once

// Vocabulary, dataset parsing (SNLI / SciTail / MPE / unified JSONL),
// embedding loading, batching with padding masks, and a synthetic toy corpus.

#include <string>
#include <unordered_map>
#include <vector>

#include "mimn/tensor.hpp"

namespace mimn {

std::vector<std::string> tokenize(const std::string& text);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocabulary();

  int add(const std::string& token);           // returns existing id if present
  int lookup(const std::string& token) const;  // kUnk for unknown tokens
  bool contains(const std::string& token) const { return to_id_.count(token) > 0; }
  const std::string& token(int id) const { return tokens_[static_cast<size_t>(id)]; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  Index size() const { return static_cast<Index>(tokens_.size()); }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::unordered_map<std::string, int> to_id_;
  std::vector<std::string> tokens_;
};

// Untokenized record; multiple premises are concatenated at load time.
struct RawExample {
  std::string premise;
  std::string hypothesis;
  std::string label;

  bool operator==(const RawExample& o) const {
    return premise == o.premise && hypothesis == o.hypothesis && label == o.label;
  }
};

struct Example {
  std::vector<int> premise;
  std::vector<int> hypothesis;
  int label = 0;

  bool operator==(const Example& o) const {
    return premise == o.premise && hypothesis == o.hypothesis && label == o.label;
  }
};

enum class DataFormat { kSnliJsonl, kScitailTsv, kMpeTsv, kUnifiedJsonl };

DataFormat parse_data_format(const std::string& name);

struct LoadStats {
  size_t kept = 0;
  size_t dropped_unlabeled = 0;  // SNLI gold_label "-"
  size_t skipped_empty = 0;      // empty sentence after tokenization
};

std::vector<RawExample> load_raw_dataset(const std::string& path, DataFormat format,
                                         LoadStats* stats = nullptr);

void write_unified_jsonl(const std::string& path, const std::vector<RawExample>& examples);

// Tokenize and map labels; grows the vocabulary when grow_vocab is set
// (training split), otherwise unseen tokens map to UNK.
std::vector<Example> to_examples(const std::vector<RawExample>& raw, Vocabulary& vocab,
                                 const std::vector<std::string>& label_names, bool grow_vocab,
                                 LoadStats* stats = nullptr);

struct Batch {
  std::vector<std::vector<int>> premise;            // [B x L_p], PAD-padded
  std::vector<std::vector<int>> hypothesis;         // [B x L_q]
  std::vector<std::vector<uint8_t>> premise_mask;   // true exactly at non-PAD positions
  std::vector<std::vector<uint8_t>> hypothesis_mask;
  std::vector<int> labels;

  size_t size() const { return labels.size(); }
};

std::vector<Batch> make_batches(const std::vector<Example>& examples, size_t batch_size,
                                std::uint64_t shuffle_seed);

// ---- synthetic toy corpus ----

extern const std::vector<std::string>& toy_content_words();
extern const std::string kToyNegationMarker;

// Deterministic labeling rule over token sets: hypothesis content contained
// in the premise -> entailment; negation marker with disjoint content ->
// contradiction; anything else -> neutral.
std::string toy_label_rule(const std::vector<std::string>& premise_tokens,
                           const std::vector<std::string>& hypothesis_tokens);

struct ToyCorpus {
  std::vector<RawExample> train, valid, test;
};

ToyCorpus generate_toy_corpus(std::uint64_t seed, size_t size);

// ---- embeddings ----

struct EmbeddingReport {
  size_t matched = 0;
  size_t oov = 0;  // non-special vocabulary tokens missing from the file
};

// Parsed rows of an embedding text file that match the given vocabulary.
// Format: one token per line followed by `dim` space-separated decimals.
// Lookup is by exact (lowercase) token first, with a cased-token fallback
// whose lowercased form matches. Throws ParseError (with line number) on a
// malformed line and DimensionError when the file dimension differs.
std::unordered_map<int, std::vector<double>> read_embedding_file(const std::string& path,
                                                                 const Vocabulary& vocab,
                                                                 Index dim);

// Matched rows are copied; OOV rows are sampled uniform in [-0.05, 0.05];
// the PAD row stays zero. The returned table is meant to be registered as a
// non-trainable parameter.
template <typename S>
Array<S> load_embeddings(const std::string& path, const Vocabulary& vocab, Index dim,
                         std::uint64_t seed, EmbeddingReport* report = nullptr) {
  const auto matched = read_embedding_file(path, vocab, dim);
  Rng rng(seed);
  Array<S> table({vocab.size(), dim});
  EmbeddingReport rep;
  for (Index id = 1; id < vocab.size(); ++id) {
    auto it = matched.find(static_cast<int>(id));
    if (it != matched.end()) {
      for (Index j = 0; j < dim; ++j) table.at(id, j) = static_cast<S>(it->second[static_cast<size_t>(j)]);
      rep.matched++;
    } else {
      for (Index j = 0; j < dim; ++j) table.at(id, j) = static_cast<S>(rng.uniform(-0.05, 0.05));
      if (id != Vocabulary::kUnk) rep.oov++;
    }
  }
  if (report) *report = rep;
  return table;
}

// Table used when no embedding file is configured (toy runs): uniform in
// [-scale, scale] with a zero PAD row, fixed during training.
template <typename S>
Array<S> random_embeddings(const Vocabulary& vocab, Index dim, std::uint64_t seed, double scale) {
  Rng rng(seed);
  Array<S> table({vocab.size(), dim});
  for (Index i = 1; i < vocab.size(); ++i) {
    for (Index j = 0; j < dim; ++j) table.at(i, j) = static_cast<S>(rng.uniform(-scale, scale));
  }
  return table;
}

// Gather embedding rows for a token id sequence into a [l x r] array.
template <typename S>
Array<S> embed_tokens(const Array<S>& table, const std::vector<int>& ids) {
  const Index r = table.shape()[1];
  Array<S> out({static_cast<Index>(ids.size()), r});
  for (size_t i = 0; i < ids.size(); ++i) {
    const S* src = table.data() + static_cast<Index>(ids[i]) * r;
    std::copy(src, src + r, out.data() + static_cast<Index>(i) * r);
  }
  return out;
}

}  // namespace mimn
