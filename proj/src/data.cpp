#include "mimn/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace mimn {

using json = nlohmann::json;

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<unk>"};
  to_id_ = {{"<pad>", kPad}, {"<unk>", kUnk}};
}

int Vocabulary::add(const std::string& token) {
  auto it = to_id_.find(token);
  if (it != to_id_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  to_id_.emplace(token, id);
  return id;
}

int Vocabulary::lookup(const std::string& token) const {
  auto it = to_id_.find(token);
  return it == to_id_.end() ? kUnk : it->second;
}

DataFormat parse_data_format(const std::string& name) {
  if (name == "snli_jsonl") return DataFormat::kSnliJsonl;
  if (name == "scitail_tsv") return DataFormat::kScitailTsv;
  if (name == "mpe_tsv") return DataFormat::kMpeTsv;
  if (name == "unified_jsonl") return DataFormat::kUnifiedJsonl;
  throw ConfigError("unknown dataset format: " + name);
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == '\t') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

std::string require_string_field(const json& rec, const char* key, size_t line_no) {
  auto it = rec.find(key);
  if (it == rec.end() || !it->is_string()) {
    throw ParseError("line " + std::to_string(line_no) + ": missing field \"" + key + "\"");
  }
  return it->get<std::string>();
}

json parse_json_line(const std::string& line, size_t line_no) {
  json rec = json::parse(line, nullptr, false);
  if (rec.is_discarded() || !rec.is_object()) {
    throw ParseError("line " + std::to_string(line_no) + ": invalid JSON record");
  }
  return rec;
}

}  // namespace

std::vector<RawExample> load_raw_dataset(const std::string& path, DataFormat format,
                                         LoadStats* stats) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset file: " + path);
  std::vector<RawExample> out;
  LoadStats st;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    RawExample ex;
    switch (format) {
      case DataFormat::kSnliJsonl: {
        json rec = parse_json_line(line, line_no);
        ex.label = require_string_field(rec, "gold_label", line_no);
        if (ex.label == "-") {  // unlabeled pair, dropped by convention
          st.dropped_unlabeled++;
          continue;
        }
        ex.premise = require_string_field(rec, "sentence1", line_no);
        ex.hypothesis = require_string_field(rec, "sentence2", line_no);
        break;
      }
      case DataFormat::kScitailTsv: {
        std::vector<std::string> cols = split_tabs(line);
        if (cols.size() != 3) {
          throw ParseError("line " + std::to_string(line_no) + ": expected 3 tab-separated columns, got " +
                           std::to_string(cols.size()));
        }
        ex.premise = cols[0];
        ex.hypothesis = cols[1];
        ex.label = cols[2];
        break;
      }
      case DataFormat::kMpeTsv: {
        // columns: [id,] premise1..premise4, hypothesis, label
        std::vector<std::string> cols = split_tabs(line);
        size_t base = 0;
        if (cols.size() == 7) {
          base = 1;
        } else if (cols.size() != 6) {
          throw ParseError("line " + std::to_string(line_no) + ": expected 6 or 7 tab-separated columns, got " +
                           std::to_string(cols.size()));
        }
        std::string premise;
        for (size_t i = 0; i < 4; ++i) {
          if (i) premise += ' ';
          premise += cols[base + i];
        }
        ex.premise = premise;
        ex.hypothesis = cols[base + 4];
        ex.label = cols[base + 5];
        break;
      }
      case DataFormat::kUnifiedJsonl: {
        json rec = parse_json_line(line, line_no);
        if (rec.contains("premises")) {
          const json& parts = rec["premises"];
          if (!parts.is_array() || parts.empty()) {
            throw ParseError("line " + std::to_string(line_no) + ": \"premises\" must be a nonempty array");
          }
          std::string premise;
          for (size_t i = 0; i < parts.size(); ++i) {
            if (!parts[i].is_string()) {
              throw ParseError("line " + std::to_string(line_no) + ": \"premises\" entries must be strings");
            }
            if (i) premise += ' ';
            premise += parts[i].get<std::string>();
          }
          ex.premise = premise;
        } else {
          ex.premise = require_string_field(rec, "premise", line_no);
        }
        ex.hypothesis = require_string_field(rec, "hypothesis", line_no);
        ex.label = require_string_field(rec, "label", line_no);
        break;
      }
    }
    st.kept++;
    out.push_back(std::move(ex));
  }
  if (stats) *stats = st;
  return out;
}

void write_unified_jsonl(const std::string& path, const std::vector<RawExample>& examples) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open file for writing: " + path);
  for (const RawExample& ex : examples) {
    json rec;
    rec["premise"] = ex.premise;
    rec["hypothesis"] = ex.hypothesis;
    rec["label"] = ex.label;
    out << rec.dump() << "\n";
  }
}

std::vector<Example> to_examples(const std::vector<RawExample>& raw, Vocabulary& vocab,
                                 const std::vector<std::string>& label_names, bool grow_vocab,
                                 LoadStats* stats) {
  std::vector<Example> out;
  LoadStats st;
  for (const RawExample& r : raw) {
    auto label_it = std::find(label_names.begin(), label_names.end(), r.label);
    if (label_it == label_names.end()) {
      throw ParseError("unknown label string: \"" + r.label + "\"");
    }
    std::vector<std::string> ptoks = tokenize(r.premise);
    std::vector<std::string> qtoks = tokenize(r.hypothesis);
    if (ptoks.empty() || qtoks.empty()) {
      st.skipped_empty++;
      continue;
    }
    Example ex;
    ex.label = static_cast<int>(label_it - label_names.begin());
    ex.premise.reserve(ptoks.size());
    ex.hypothesis.reserve(qtoks.size());
    for (const std::string& t : ptoks) ex.premise.push_back(grow_vocab ? vocab.add(t) : vocab.lookup(t));
    for (const std::string& t : qtoks) ex.hypothesis.push_back(grow_vocab ? vocab.add(t) : vocab.lookup(t));
    st.kept++;
    out.push_back(std::move(ex));
  }
  if (stats) *stats = st;
  return out;
}

std::vector<Batch> make_batches(const std::vector<Example>& examples, size_t batch_size,
                                std::uint64_t shuffle_seed) {
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(shuffle_seed);
  rng.shuffle(order);

  std::vector<Batch> out;
  for (size_t start = 0; start < order.size(); start += batch_size) {
    const size_t end = std::min(start + batch_size, order.size());
    Batch b;
    size_t max_p = 0, max_q = 0;
    for (size_t i = start; i < end; ++i) {
      max_p = std::max(max_p, examples[order[i]].premise.size());
      max_q = std::max(max_q, examples[order[i]].hypothesis.size());
    }
    for (size_t i = start; i < end; ++i) {
      const Example& ex = examples[order[i]];
      std::vector<int> p(max_p, Vocabulary::kPad), q(max_q, Vocabulary::kPad);
      std::vector<uint8_t> pm(max_p, 0), qm(max_q, 0);
      std::copy(ex.premise.begin(), ex.premise.end(), p.begin());
      std::copy(ex.hypothesis.begin(), ex.hypothesis.end(), q.begin());
      std::fill(pm.begin(), pm.begin() + static_cast<long>(ex.premise.size()), 1);
      std::fill(qm.begin(), qm.begin() + static_cast<long>(ex.hypothesis.size()), 1);
      b.premise.push_back(std::move(p));
      b.hypothesis.push_back(std::move(q));
      b.premise_mask.push_back(std::move(pm));
      b.hypothesis_mask.push_back(std::move(qm));
      b.labels.push_back(ex.label);
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---- toy corpus ----

const std::vector<std::string>& toy_content_words() {
  static const std::vector<std::string> words = {
      "apple",  "bear",   "cloud",  "door",   "eagle",  "fox",    "glass",  "house",
      "island", "jacket", "kite",   "lamp",   "mountain", "needle", "ocean", "piano",
      "queen",  "river",  "stone",  "tiger",  "umbrella", "violin", "window", "bridge",
      "candle", "drum",   "forest", "garden", "hammer", "ladder"};
  return words;
}

const std::string kToyNegationMarker = "not";

std::string toy_label_rule(const std::vector<std::string>& premise_tokens,
                           const std::vector<std::string>& hypothesis_tokens) {
  std::unordered_set<std::string> premise(premise_tokens.begin(), premise_tokens.end());
  bool has_marker = false;
  bool subset = true;
  bool overlap = false;
  for (const std::string& t : hypothesis_tokens) {
    if (t == kToyNegationMarker) {
      has_marker = true;
      continue;
    }
    if (premise.count(t)) {
      overlap = true;
    } else {
      subset = false;
    }
  }
  if (!has_marker && subset) return "entailment";
  if (has_marker && !overlap) return "contradiction";
  return "neutral";
}

namespace {

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

RawExample make_toy_example(Rng& rng, int kind) {
  const std::vector<std::string>& words = toy_content_words();
  std::vector<std::string> pool = words;
  rng.shuffle(pool);
  const size_t n_premise = 4 + static_cast<size_t>(rng.index(5));  // 4..8
  std::vector<std::string> premise(pool.begin(), pool.begin() + static_cast<long>(n_premise));
  std::vector<std::string> rest(pool.begin() + static_cast<long>(n_premise), pool.end());

  std::vector<std::string> hyp;
  switch (kind) {
    case 0: {  // hypothesis tokens drawn from the premise
      const size_t n = 2 + static_cast<size_t>(rng.index(3));  // 2..4
      std::vector<std::string> shuffled = premise;
      rng.shuffle(shuffled);
      hyp.assign(shuffled.begin(), shuffled.begin() + static_cast<long>(std::min(n, n_premise)));
      break;
    }
    case 1: {  // disjoint content plus the negation marker
      const size_t n = 1 + static_cast<size_t>(rng.index(3));  // 1..3
      hyp.assign(rest.begin(), rest.begin() + static_cast<long>(n));
      hyp.insert(hyp.begin() + static_cast<long>(rng.index(static_cast<Index>(hyp.size()) + 1)),
                 kToyNegationMarker);
      break;
    }
    default: {  // partial overlap, no marker
      const size_t n_in = 1 + static_cast<size_t>(rng.index(2));   // 1..2 from premise
      const size_t n_out = 1 + static_cast<size_t>(rng.index(2));  // 1..2 from outside
      std::vector<std::string> shuffled = premise;
      rng.shuffle(shuffled);
      hyp.assign(shuffled.begin(), shuffled.begin() + static_cast<long>(n_in));
      hyp.insert(hyp.end(), rest.begin(), rest.begin() + static_cast<long>(n_out));
      rng.shuffle(hyp);
      break;
    }
  }
  RawExample ex;
  ex.premise = join(premise);
  ex.hypothesis = join(hyp);
  ex.label = toy_label_rule(premise, hyp);
  return ex;
}

}  // namespace

ToyCorpus generate_toy_corpus(std::uint64_t seed, size_t size) {
  if (size < 30) throw ContractError("toy corpus size must be >= 30");
  Rng rng(seed);
  std::vector<RawExample> all;
  all.reserve(size);
  for (size_t i = 0; i < size; ++i) all.push_back(make_toy_example(rng, static_cast<int>(i % 3)));
  rng.shuffle(all);

  const size_t n_train = size * 8 / 10;
  const size_t n_valid = (size - n_train) / 2;
  ToyCorpus corpus;
  corpus.train.assign(all.begin(), all.begin() + static_cast<long>(n_train));
  corpus.valid.assign(all.begin() + static_cast<long>(n_train),
                      all.begin() + static_cast<long>(n_train + n_valid));
  corpus.test.assign(all.begin() + static_cast<long>(n_train + n_valid), all.end());
  return corpus;
}

// ---- embeddings ----

std::unordered_map<int, std::vector<double>> read_embedding_file(const std::string& path,
                                                                 const Vocabulary& vocab,
                                                                 Index dim) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open embedding file: " + path);
  std::unordered_map<int, std::vector<double>> matched;
  std::unordered_set<int> exact;
  std::string line;
  size_t line_no = 0;
  bool dim_checked = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string token;
    is >> token;
    std::vector<double> values;
    values.reserve(static_cast<size_t>(dim));
    double v;
    while (is >> v) values.push_back(v);
    if (!is.eof()) {
      throw ParseError("line " + std::to_string(line_no) + ": non-numeric embedding value");
    }
    if (!dim_checked) {
      if (static_cast<Index>(values.size()) != dim) {
        throw DimensionError("embedding file dimension " + std::to_string(values.size()) +
                             " does not match configured dimension " + std::to_string(dim));
      }
      dim_checked = true;
    } else if (static_cast<Index>(values.size()) != dim) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                       " values, got " + std::to_string(values.size()));
    }

    if (vocab.contains(token)) {
      const int id = vocab.lookup(token);
      matched[id] = values;
      exact.insert(id);
      continue;
    }
    // cased fallback: a file token whose lowercased form is in the vocabulary
    std::string lowered = token;
    for (char& ch : lowered) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (lowered != token && vocab.contains(lowered)) {
      const int id = vocab.lookup(lowered);
      if (!exact.count(id) && !matched.count(id)) matched[id] = values;
    }
  }
  return matched;
}

}  // namespace mimn
