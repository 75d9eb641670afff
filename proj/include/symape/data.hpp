#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace symape {

// Subword vocabulary learned with byte-pair merges. Words are prefixed
// with a standalone boundary symbol so decode can restore spacing:
// "ab cd" -> [▁, a, b, ▁, c, d] before merges are applied.
class Vocabulary {
 public:
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kBos = 1;
  static constexpr int64_t kEos = 2;
  static constexpr int64_t kUnk = 3;
  static constexpr int64_t kNumReserved = 4;

  // Greedy merge learning until `target_size` tokens exist or no pair is
  // left; ties broken by the lexicographically smallest pair.
  static Vocabulary learn(const std::vector<std::string>& lines,
                          int64_t target_size);

  // wrap_bos_eos selects decoder-target framing; encoder streams are bare.
  std::vector<int64_t> encode(const std::string& sentence,
                              bool wrap_bos_eos = false) const;
  std::string decode(std::span<const int64_t> ids) const;

  std::vector<std::string> segment_word(const std::string& word) const;

  int64_t size() const { return static_cast<int64_t>(id_to_token_.size()); }
  const std::string& token(int64_t id) const;
  int64_t alphabet_size() const { return alphabet_size_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const {
    return merges_;
  }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  int64_t id_of(const std::string& token) const;  // -1 if absent
  void push_token(const std::string& token);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int64_t> token_to_id_;
  std::vector<std::pair<std::string, std::string>> merges_;
  int64_t alphabet_size_ = 0;
};

// One training example, already numericalized. pe is the postedited
// reference without BOS/EOS framing.
struct TripleExample {
  std::vector<int64_t> src;
  std::vector<int64_t> mt;
  std::vector<int64_t> pe;
};

enum class CorpusRole { Pretrain, Finetune, Validation, Test };

struct Corpus {
  std::string name;
  CorpusRole role = CorpusRole::Finetune;
  std::vector<TripleExample> examples;
};

std::vector<std::string> read_lines(const std::string& path);
std::vector<std::string> tokenize_whitespace(const std::string& line);

// Loads three aligned files; alignment and empty lines are validated
// eagerly with the first offending line number. Training corpora drop
// examples longer than max_len after segmentation; others truncate.
Corpus load_corpus(const std::string& src_path, const std::string& mt_path,
                   const std::string& pe_path, const Vocabulary& vocab,
                   const std::string& name, CorpusRole role, int64_t max_len);

// Repeatable example source; exact iteration order is fixed by the seed.
class ExampleStream {
 public:
  virtual ~ExampleStream() = default;
  virtual const TripleExample& next() = 0;
};

// Cycles one corpus, reshuffling example order at each epoch boundary.
std::unique_ptr<ExampleStream> corpus_stream(const Corpus& corpus,
                                             uint64_t seed);

// Deterministic interleave: each frame holds `ratio` pretrain examples
// followed by one finetune example, so any window of (ratio+1)*k
// consecutive examples splits exactly ratio*k : k.
std::unique_ptr<ExampleStream> blend(const Corpus& pretrain,
                                     const Corpus& finetune, int64_t ratio,
                                     uint64_t seed);

}  // namespace symape
