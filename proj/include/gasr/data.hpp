#pragma once

// Synthetic noisy-channel speech-to-text corpora.
//
// A Language fixes the "words": one d-dimensional prototype per word token
// and a bigram transition table over words. A DomainSpec fixes the
// "acoustics": how each word turns into frames (repeat count, additive
// Gaussian noise, spurious pure-noise frames, frame dropout). Clean and
// out-of-domain corpora share one Language and differ only in DomainSpec.
//
// Corpus file: one header line, then one tab-separated record per utterance
//
//   id  domain  T  x_1 .. x_T  N  d  v_1 .. v_{N*d}
//
// with frame values row-major, 9 significant digits.

#include <Eigen/Core>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gasr/model.hpp"

namespace gasr {

enum class Domain { kClean, kOod };

Domain parse_domain(const std::string& text);
std::string to_string(Domain domain);

struct DomainSpec {
  Domain domain = Domain::kClean;
  double noise = 0.3;  // per-dimension Gaussian sigma added to prototypes
  int min_frames_per_token = 1;
  int max_frames_per_token = 3;
  double p_spurious = 0.0;  // chance of a pure-noise frame before each token frame
  double p_drop = 0.0;      // chance of dropping a token's extra frames
  int min_tokens = 1;
  int max_tokens = 12;

  static DomainSpec clean();
  static DomainSpec ood();
  // sigma = 0, no spurious frames, no dropout.
  static DomainSpec noiseless();
  static DomainSpec for_domain(Domain domain);
  void validate() const;
};

class Language {
 public:
  using PrototypeTable = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  static constexpr std::uint64_t kDefaultSeed = 20250601;

  Language(const Vocab& vocab, int frame_dim, std::uint64_t seed = kDefaultSeed);

  const Vocab& vocab() const { return vocab_; }
  int frame_dim() const { return frame_dim_; }
  // Row w - Vocab::kReserved holds the prototype of word token w.
  const PrototypeTable& prototypes() const { return prototypes_; }
  Eigen::Ref<const Eigen::RowVectorXf> prototype(int token) const;
  // Row 0: start distribution; row 1 + k: successors of word k. Rows sum to 1.
  const Eigen::MatrixXd& bigram() const { return bigram_; }

  std::uint64_t prototype_checksum() const;
  std::uint64_t bigram_checksum() const;

 private:
  Vocab vocab_;
  int frame_dim_;
  PrototypeTable prototypes_;
  Eigen::MatrixXd bigram_;
};

struct Utterance {
  std::string id;
  Domain domain = Domain::kClean;
  std::vector<int> transcript;  // word ids x_1..x_T
  Prompt prompt;                // frames s_1..s_N

  bool operator==(const Utterance& other) const;
};

struct Corpus {
  static constexpr int kFormatVersion = 1;

  int vocab_size = 64;
  int frame_dim = 16;
  std::uint64_t vocab_checksum = 0;
  std::uint64_t prototype_checksum = 0;
  std::vector<Utterance> utterances;

  std::size_t size() const { return utterances.size(); }
  bool operator==(const Corpus& other) const = default;
  // Order-sensitive digest over ids, domains, transcripts and frame bits.
  std::uint64_t checksum() const;
};

Corpus generate_corpus(std::uint64_t seed, int count, const DomainSpec& domain, const Language& language);

void write_corpus(std::ostream& out, const Corpus& corpus);
void write_corpus(const std::string& path, const Corpus& corpus);
// Throws ParseError naming the 1-based record index of the first bad record.
Corpus read_corpus(std::istream& in);
Corpus read_corpus(const std::string& path);

struct CorpusSplit {
  Corpus train, dev, test;
};

// Seeded disjoint partition; dev and test take the given fractions.
CorpusSplit split_corpus(const Corpus& corpus, std::uint64_t seed, double dev_fraction, double test_fraction);

// Oracle decoder: nearest prototype per frame, then consecutive duplicates
// collapsed (the bigram table has no self-transitions).
std::vector<int> nearest_prototype_decode(const FrameMatrix& frames, const Language& language);

// Stable seed mixing for per-item derived streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace gasr
