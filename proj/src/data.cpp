#include "symape/data.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "symape/rng.hpp"

namespace symape {

namespace {

const char* kBoundary = "\xe2\x96\x81";  // ▁ (U+2581)
const char* kReservedTokens[] = {"<pad>", "<bos>", "<eos>", "<unk>"};

// Splits a word into UTF-8 codepoint strings.
std::vector<std::string> utf8_chars(const std::string& word) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < word.size()) {
    size_t len = 1;
    const unsigned char c = static_cast<unsigned char>(word[i]);
    if ((c & 0x80) == 0x00) len = 1;
    else if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    len = std::min(len, word.size() - i);
    out.push_back(word.substr(i, len));
    i += len;
  }
  return out;
}

// One left-to-right pass replacing adjacent (left, right) with their
// concatenation; identical to the rewrite used while learning merges.
void apply_merge(std::vector<std::string>& symbols, const std::string& left,
                 const std::string& right) {
  size_t w = 0;
  for (size_t r = 0; r < symbols.size();) {
    if (r + 1 < symbols.size() && symbols[r] == left && symbols[r + 1] == right) {
      symbols[w++] = left + right;
      r += 2;
    } else {
      symbols[w++] = std::move(symbols[r]);
      r += 1;
    }
  }
  symbols.resize(w);
}

std::vector<std::string> word_symbols(const std::string& word) {
  std::vector<std::string> symbols;
  symbols.push_back(kBoundary);
  for (auto& c : utf8_chars(word)) symbols.push_back(c);
  return symbols;
}

}  // namespace

std::vector<std::string> tokenize_whitespace(const std::string& line) {
  std::vector<std::string> tokens;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) tokens.push_back(tok);
  return tokens;
}

Vocabulary Vocabulary::learn(const std::vector<std::string>& lines,
                             int64_t target_size) {
  if (target_size < kNumReserved)
    throw std::invalid_argument(
        "learn: target_size smaller than the reserved token count");

  // Word frequency table; merges operate on word types.
  std::map<std::string, int64_t> word_freq;
  for (const auto& line : lines)
    for (const auto& w : tokenize_whitespace(line)) ++word_freq[w];
  if (word_freq.empty())
    throw std::invalid_argument("learn: corpus contains no tokens");

  std::vector<std::pair<std::vector<std::string>, int64_t>> words;
  std::map<std::string, int64_t> alphabet;
  for (const auto& [word, freq] : word_freq) {
    auto symbols = word_symbols(word);
    for (const auto& s : symbols) ++alphabet[s];
    words.emplace_back(std::move(symbols), freq);
  }

  Vocabulary vocab;
  for (const char* t : kReservedTokens) vocab.push_token(t);
  for (const auto& [sym, cnt] : alphabet) vocab.push_token(sym);
  vocab.alphabet_size_ = static_cast<int64_t>(alphabet.size());

  while (vocab.size() < target_size) {
    std::map<std::pair<std::string, std::string>, int64_t> pair_freq;
    for (const auto& [symbols, freq] : words)
      for (size_t i = 0; i + 1 < symbols.size(); ++i)
        pair_freq[{symbols[i], symbols[i + 1]}] += freq;
    if (pair_freq.empty()) break;

    // Highest count wins; the ordered map makes the lexicographically
    // smallest pair the first one seen at that count.
    std::pair<std::string, std::string> best;
    int64_t best_count = 0;
    for (const auto& [pair, count] : pair_freq) {
      if (count > best_count) {
        best = pair;
        best_count = count;
      }
    }

    for (auto& [symbols, freq] : words) apply_merge(symbols, best.first, best.second);
    vocab.merges_.push_back(best);
    const std::string merged = best.first + best.second;
    if (vocab.id_of(merged) < 0) vocab.push_token(merged);
  }
  return vocab;
}

int64_t Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? -1 : it->second;
}

void Vocabulary::push_token(const std::string& token) {
  token_to_id_.emplace(token, static_cast<int64_t>(id_to_token_.size()));
  id_to_token_.push_back(token);
}

std::vector<std::string> Vocabulary::segment_word(const std::string& word) const {
  auto symbols = word_symbols(word);
  for (const auto& [left, right] : merges_) apply_merge(symbols, left, right);
  return symbols;
}

std::vector<int64_t> Vocabulary::encode(const std::string& sentence,
                                        bool wrap_bos_eos) const {
  std::vector<int64_t> ids;
  if (wrap_bos_eos) ids.push_back(kBos);
  for (const auto& word : tokenize_whitespace(sentence)) {
    for (const auto& piece : segment_word(word)) {
      const int64_t id = id_of(piece);
      ids.push_back(id < 0 ? kUnk : id);
    }
  }
  if (wrap_bos_eos) ids.push_back(kEos);
  return ids;
}

std::string Vocabulary::decode(std::span<const int64_t> ids) const {
  std::string joined;
  for (int64_t id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    joined += token(id);
  }
  // Boundary symbols become spaces; drop the leading one.
  std::string out;
  size_t i = 0;
  const std::string boundary = kBoundary;
  while (i < joined.size()) {
    if (joined.compare(i, boundary.size(), boundary) == 0) {
      if (!out.empty()) out += ' ';
      i += boundary.size();
    } else {
      out += joined[i++];
    }
  }
  return out;
}

const std::string& Vocabulary::token(int64_t id) const {
  if (id < 0 || id >= size())
    throw std::out_of_range("token: id " + std::to_string(id) +
                            " outside vocabulary");
  return id_to_token_[static_cast<size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save: cannot open " + path);
  os << "symape-vocab 1\n";
  os << "reserved";
  for (const char* t : kReservedTokens) os << " " << t;
  os << "\n";
  os << "alphabet " << alphabet_size_ << "\n";
  for (int64_t i = kNumReserved; i < kNumReserved + alphabet_size_; ++i)
    os << id_to_token_[static_cast<size_t>(i)] << "\n";
  os << "merges " << merges_.size() << "\n";
  for (const auto& [l, r] : merges_) os << l << " " << r << "\n";
  if (!os) throw std::runtime_error("save: write failed for " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load: cannot open " + path);
  std::string magic;
  int version = 0;
  is >> magic >> version;
  if (magic != "symape-vocab" || version != 1)
    throw std::runtime_error("load: " + path + " is not a v1 vocabulary file");

  std::string tag;
  Vocabulary vocab;
  is >> tag;
  if (tag != "reserved") throw std::runtime_error("load: missing reserved line");
  for (int i = 0; i < kNumReserved; ++i) {
    std::string t;
    is >> t;
    vocab.push_token(t);
  }
  is >> tag >> vocab.alphabet_size_;
  if (tag != "alphabet") throw std::runtime_error("load: missing alphabet line");
  for (int64_t i = 0; i < vocab.alphabet_size_; ++i) {
    std::string s;
    is >> s;
    vocab.push_token(s);
  }
  size_t merge_count = 0;
  is >> tag >> merge_count;
  if (tag != "merges") throw std::runtime_error("load: missing merges line");
  for (size_t i = 0; i < merge_count; ++i) {
    std::string l, r;
    is >> l >> r;
    if (!is) throw std::runtime_error("load: truncated merge list");
    vocab.merges_.emplace_back(l, r);
    const std::string merged = l + r;
    if (vocab.id_of(merged) < 0) vocab.push_token(merged);
  }
  return vocab;
}

// ---------------------------------------------------------------------------
// corpora
// ---------------------------------------------------------------------------

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

namespace {

void validate_lines(const std::vector<std::string>& lines,
                    const std::string& path, size_t expected) {
  if (lines.size() != expected)
    throw std::runtime_error(path + ": misaligned corpus, expected " +
                             std::to_string(expected) + " lines at line " +
                             std::to_string(std::min(lines.size(), expected) + 1));
  for (size_t i = 0; i < lines.size(); ++i)
    if (tokenize_whitespace(lines[i]).empty())
      throw std::runtime_error(path + ": empty line " + std::to_string(i + 1));
}

}  // namespace

Corpus load_corpus(const std::string& src_path, const std::string& mt_path,
                   const std::string& pe_path, const Vocabulary& vocab,
                   const std::string& name, CorpusRole role, int64_t max_len) {
  auto src = read_lines(src_path);
  auto mt = read_lines(mt_path);
  auto pe = read_lines(pe_path);
  validate_lines(src, src_path, src.size());
  validate_lines(mt, mt_path, src.size());
  validate_lines(pe, pe_path, src.size());

  const bool training = role == CorpusRole::Pretrain || role == CorpusRole::Finetune;
  Corpus corpus;
  corpus.name = name;
  corpus.role = role;
  int64_t dropped = 0;
  for (size_t i = 0; i < src.size(); ++i) {
    TripleExample ex;
    ex.src = vocab.encode(src[i]);
    ex.mt = vocab.encode(mt[i]);
    ex.pe = vocab.encode(pe[i]);
    const int64_t longest = static_cast<int64_t>(
        std::max({ex.src.size(), ex.mt.size(), ex.pe.size()}));
    if (longest + 2 > max_len) {  // +2 leaves room for BOS/EOS framing
      if (training) {
        ++dropped;
        continue;
      }
      const size_t cap = static_cast<size_t>(max_len - 2);
      ex.src.resize(std::min(ex.src.size(), cap));
      ex.mt.resize(std::min(ex.mt.size(), cap));
      ex.pe.resize(std::min(ex.pe.size(), cap));
      std::cerr << name << ": truncated line " << i + 1 << " to max_len\n";
    }
    corpus.examples.push_back(std::move(ex));
  }
  if (dropped > 0)
    std::cerr << name << ": dropped " << dropped
              << " examples longer than max_len\n";
  if (corpus.examples.empty())
    throw std::runtime_error(name + ": corpus is empty after length filtering");
  return corpus;
}

// ---------------------------------------------------------------------------
// streams
// ---------------------------------------------------------------------------

namespace {

class CorpusStream final : public ExampleStream {
 public:
  CorpusStream(const Corpus& corpus, uint64_t seed)
      : corpus_(corpus), rng_(seed), order_(corpus.examples.size()) {
    if (corpus.examples.empty())
      throw std::invalid_argument("corpus_stream: empty corpus");
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  const TripleExample& next() override {
    if (cursor_ == order_.size()) {
      cursor_ = 0;
      rng_.shuffle(order_);
    }
    return corpus_.examples[order_[cursor_++]];
  }

 private:
  const Corpus& corpus_;
  Rng rng_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
};

class BlendStream final : public ExampleStream {
 public:
  BlendStream(const Corpus& pretrain, const Corpus& finetune, int64_t ratio,
              uint64_t seed)
      : pretrain_(pretrain, seed ^ 0x70726574ULL),
        finetune_(finetune, seed ^ 0x66696e65ULL),
        ratio_(ratio) {}

  const TripleExample& next() override {
    const TripleExample& ex =
        frame_pos_ < ratio_ ? pretrain_.next() : finetune_.next();
    frame_pos_ = (frame_pos_ + 1) % (ratio_ + 1);
    return ex;
  }

 private:
  CorpusStream pretrain_;
  CorpusStream finetune_;
  int64_t ratio_;
  int64_t frame_pos_ = 0;
};

}  // namespace

std::unique_ptr<ExampleStream> corpus_stream(const Corpus& corpus,
                                             uint64_t seed) {
  return std::make_unique<CorpusStream>(corpus, seed);
}

std::unique_ptr<ExampleStream> blend(const Corpus& pretrain,
                                     const Corpus& finetune, int64_t ratio,
                                     uint64_t seed) {
  if (ratio < 1) throw std::invalid_argument("blend: ratio must be >= 1");
  if (pretrain.examples.empty() || finetune.examples.empty())
    throw std::invalid_argument("blend: both corpora must be nonempty");
  return std::make_unique<BlendStream>(pretrain, finetune, ratio, seed);
}

}  // namespace symape
