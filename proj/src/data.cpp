#include "gasr/data.hpp"

#include <algorithm>
#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "gasr/checksum.hpp"

namespace gasr {

Domain parse_domain(const std::string& text) {
  if (text == "clean") return Domain::kClean;
  if (text == "ood") return Domain::kOod;
  throw ContractError("unknown domain '" + text + "' (expected clean|ood)");
}

std::string to_string(Domain domain) { return domain == Domain::kOod ? "ood" : "clean"; }

DomainSpec DomainSpec::clean() { return DomainSpec{}; }

DomainSpec DomainSpec::ood() {
  DomainSpec s;
  s.domain = Domain::kOod;
  s.noise = 0.4;
  s.p_spurious = 0.3;
  return s;
}

DomainSpec DomainSpec::noiseless() {
  DomainSpec s;
  s.noise = 0.0;
  return s;
}

DomainSpec DomainSpec::for_domain(Domain domain) { return domain == Domain::kOod ? ood() : clean(); }

void DomainSpec::validate() const {
  require(noise >= 0.0, "domain: noise must be non-negative");
  require(p_spurious >= 0.0 && p_spurious < 1.0, "domain: p_spurious must lie in [0, 1)");
  require(p_drop >= 0.0 && p_drop < 1.0, "domain: p_drop must lie in [0, 1)");
  require(min_frames_per_token >= 1 && max_frames_per_token >= min_frames_per_token,
          "domain: bad frames-per-token range");
  require(min_tokens >= 1 && max_tokens >= min_tokens && max_tokens <= 12, "domain: transcript length must be 1..12");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the combined state
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------- Language

Language::Language(const Vocab& vocab, int frame_dim, std::uint64_t seed) : vocab_(vocab), frame_dim_(frame_dim) {
  require(vocab.word_count() >= 2, "language: need at least two word tokens");
  require(frame_dim >= 1, "language: frame_dim must be positive");
  const int words = vocab.word_count();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  prototypes_.resize(words, frame_dim);
  for (Index i = 0; i < prototypes_.size(); ++i) prototypes_.data()[i] = static_cast<float>(normal(rng));

  // Peaked successor distributions give the decoder a learnable prior.
  constexpr double kPeakedness = 2.0;
  bigram_.resize(words + 1, words);
  for (int r = 0; r <= words; ++r) {
    for (int c = 0; c < words; ++c) bigram_(r, c) = std::exp(kPeakedness * normal(rng));
    if (r > 0) bigram_(r, r - 1) = 0.0;
    bigram_.row(r) /= bigram_.row(r).sum();
  }
}

Eigen::Ref<const Eigen::RowVectorXf> Language::prototype(int token) const {
  require(vocab_.is_word(token), "prototype: not a word token");
  return prototypes_.row(token - Vocab::kReserved);
}

std::uint64_t Language::prototype_checksum() const {
  Fnv1a h;
  h.update_value(static_cast<std::int64_t>(prototypes_.rows()));
  h.update_value(static_cast<std::int64_t>(prototypes_.cols()));
  for (Index i = 0; i < prototypes_.size(); ++i) h.update_value(prototypes_.data()[i]);
  return h.digest();
}

std::uint64_t Language::bigram_checksum() const {
  Fnv1a h;
  for (Index i = 0; i < bigram_.size(); ++i) h.update_value(bigram_.data()[i]);
  return h.digest();
}

// ---------------------------------------------------------------- Utterance / Corpus

bool Utterance::operator==(const Utterance& other) const {
  return id == other.id && domain == other.domain && transcript == other.transcript &&
         prompt.frames.rows() == other.prompt.frames.rows() && prompt.frames.cols() == other.prompt.frames.cols() &&
         prompt.frames == other.prompt.frames;
}

std::uint64_t Corpus::checksum() const {
  Fnv1a h;
  h.update_value(static_cast<std::int64_t>(vocab_size));
  h.update_value(static_cast<std::int64_t>(frame_dim));
  h.update_value(vocab_checksum);
  h.update_value(prototype_checksum);
  for (const auto& u : utterances) {
    h.update(u.id);
    h.update(to_string(u.domain));
    for (int t : u.transcript) h.update_value(static_cast<std::int32_t>(t));
    h.update_value(static_cast<std::int64_t>(u.prompt.frames.rows()));
    for (Index i = 0; i < u.prompt.frames.size(); ++i) h.update_value(u.prompt.frames.data()[i]);
  }
  return h.digest();
}

namespace {

int draw(std::mt19937_64& rng, const Eigen::RowVectorXd& probs) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double u = uniform(rng);
  double acc = 0.0;
  for (Index i = 0; i < probs.size(); ++i) {
    acc += probs(i);
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

Utterance generate_utterance(std::uint64_t seed, int index, const DomainSpec& spec, const Language& language) {
  std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(index)));
  std::uniform_int_distribution<int> length(spec.min_tokens, spec.max_tokens);
  std::uniform_int_distribution<int> repeats(spec.min_frames_per_token, spec.max_frames_per_token);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  Utterance u;
  char id[64];
  std::snprintf(id, sizeof(id), "%s-%" PRIu64 "-%06d", to_string(spec.domain).c_str(), seed, index);
  u.id = id;
  u.domain = spec.domain;
  const int words = language.vocab().word_count();
  (void)words;
  const int count = length(rng);
  int prev = -1;
  for (int t = 0; t < count; ++t) {
    const int w = draw(rng, language.bigram().row(prev + 1));
    u.transcript.push_back(w + Vocab::kReserved);
    prev = w;
  }

  const int d = language.frame_dim();
  std::vector<Eigen::RowVectorXf> frames;
  for (int token : u.transcript) {
    const int k = repeats(rng);
    std::vector<bool> keep(k, true);
    for (int f = 1; f < k; ++f) keep[f] = !(uniform(rng) < spec.p_drop);
    for (int f = 0; f < k; ++f) {
      if (uniform(rng) < spec.p_spurious) {
        Eigen::RowVectorXf noise(d);
        for (int j = 0; j < d; ++j) noise(j) = static_cast<float>(normal(rng));
        frames.push_back(noise);
      }
      Eigen::RowVectorXf frame = language.prototype(token);
      for (int j = 0; j < d; ++j) frame(j) += static_cast<float>(spec.noise * normal(rng));
      if (keep[f]) frames.push_back(frame);
    }
  }
  u.prompt.frames.resize(static_cast<Index>(frames.size()), d);
  for (std::size_t r = 0; r < frames.size(); ++r) u.prompt.frames.row(static_cast<Index>(r)) = frames[r];
  return u;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

std::vector<std::string_view> words(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    const std::size_t start = i;
    while (i < s.size() && s[i] != ' ') ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view text, T& value, int base = 10) {
  const char* end = text.data() + text.size();
  std::from_chars_result r;
  if constexpr (std::is_floating_point_v<T>) {
    r = std::from_chars(text.data(), end, value);
  } else {
    r = std::from_chars(text.data(), end, value, base);
  }
  return r.ec == std::errc() && r.ptr == end;
}

[[noreturn]] void record_error(std::size_t record, const std::string& what) {
  throw ParseError("corpus record " + std::to_string(record) + ": " + what);
}

}  // namespace

Corpus generate_corpus(std::uint64_t seed, int count, const DomainSpec& domain, const Language& language) {
  require(count >= 1, "generate_corpus: count must be at least 1");
  domain.validate();
  Corpus corpus;
  corpus.vocab_size = language.vocab().size;
  corpus.frame_dim = language.frame_dim();
  corpus.vocab_checksum = language.vocab().checksum();
  corpus.prototype_checksum = language.prototype_checksum();
  corpus.utterances.reserve(count);
  for (int i = 0; i < count; ++i) corpus.utterances.push_back(generate_utterance(seed, i, domain, language));
  return corpus;
}

void write_corpus(std::ostream& out, const Corpus& corpus) {
  out << "gasr-corpus\tversion=" << Corpus::kFormatVersion << "\tvocab=" << corpus.vocab_size
      << "\tframe_dim=" << corpus.frame_dim << "\tvocab_checksum=" << hex64(corpus.vocab_checksum)
      << "\tprototype_checksum=" << hex64(corpus.prototype_checksum) << "\tcount=" << corpus.size() << '\n';
  char buf[32];
  for (const auto& u : corpus.utterances) {
    out << u.id << '\t' << to_string(u.domain) << '\t' << u.transcript.size() << '\t';
    for (std::size_t t = 0; t < u.transcript.size(); ++t) out << (t ? " " : "") << u.transcript[t];
    out << '\t' << u.prompt.frames.rows() << '\t' << u.prompt.frames.cols() << '\t';
    for (Index i = 0; i < u.prompt.frames.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(u.prompt.frames.data()[i]));
      if (i) out << ' ';
      out << buf;
    }
    out << '\n';
  }
}

void write_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open corpus file for writing: " + path);
  write_corpus(out, corpus);
  out.flush();
  if (!out) throw std::runtime_error("failed writing corpus file: " + path);
}

Corpus read_corpus(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("corpus: missing header line");
  const auto header = split(line, '\t');
  if (header.empty() || header[0] != "gasr-corpus") throw ParseError("corpus: bad header magic");
  Corpus corpus;
  std::size_t declared = 0;
  int version = -1;
  for (std::size_t i = 1; i < header.size(); ++i) {
    const auto eq = header[i].find('=');
    if (eq == std::string_view::npos) throw ParseError("corpus: malformed header field");
    const auto key = header[i].substr(0, eq);
    const auto value = header[i].substr(eq + 1);
    bool ok = true;
    if (key == "version") ok = parse_number(value, version);
    else if (key == "vocab") ok = parse_number(value, corpus.vocab_size);
    else if (key == "frame_dim") ok = parse_number(value, corpus.frame_dim);
    else if (key == "vocab_checksum") ok = parse_number(value, corpus.vocab_checksum, 16);
    else if (key == "prototype_checksum") ok = parse_number(value, corpus.prototype_checksum, 16);
    else if (key == "count") ok = parse_number(value, declared);
    else throw ParseError("corpus: unknown header field '" + std::string(key) + "'");
    if (!ok) throw ParseError("corpus: bad value for header field '" + std::string(key) + "'");
  }
  if (version != Corpus::kFormatVersion) throw ParseError("corpus: unsupported format version");

  std::size_t record = 0;
  while (std::getline(in, line)) {
    ++record;
    const auto fields = split(line, '\t');
    if (fields.size() != 7) record_error(record, "expected 7 tab-separated fields, got " + std::to_string(fields.size()));
    Utterance u;
    u.id = std::string(fields[0]);
    if (u.id.empty()) record_error(record, "empty id");
    if (fields[1] == "clean") u.domain = Domain::kClean;
    else if (fields[1] == "ood") u.domain = Domain::kOod;
    else record_error(record, "unknown domain '" + std::string(fields[1]) + "'");
    std::size_t t_count = 0;
    if (!parse_number(fields[2], t_count)) record_error(record, "bad transcript length");
    const auto toks = words(fields[3]);
    if (toks.size() != t_count) record_error(record, "transcript length mismatch");
    for (auto tok : toks) {
      int id = 0;
      if (!parse_number(tok, id) || id < Vocab::kReserved || id >= corpus.vocab_size) {
        record_error(record, "bad transcript token '" + std::string(tok) + "'");
      }
      u.transcript.push_back(id);
    }
    Index n = 0, d = 0;
    if (!parse_number(fields[4], n) || n < 0) record_error(record, "bad frame count");
    if (!parse_number(fields[5], d) || d != corpus.frame_dim) record_error(record, "bad frame dimension");
    const auto vals = words(fields[6]);
    if (static_cast<Index>(vals.size()) != n * d) {
      record_error(record, "expected " + std::to_string(n * d) + " frame values, got " + std::to_string(vals.size()));
    }
    u.prompt.frames.resize(n, d);
    for (std::size_t i = 0; i < vals.size(); ++i) {
      if (!parse_number(vals[i], u.prompt.frames.data()[i])) record_error(record, "bad frame value");
    }
    corpus.utterances.push_back(std::move(u));
  }
  if (corpus.size() != declared) {
    throw ParseError("corpus record " + std::to_string(corpus.size() + 1) + ": missing (header declares " +
                     std::to_string(declared) + " records, file holds " + std::to_string(corpus.size()) + ")");
  }
  return corpus;
}

Corpus read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  try {
    return read_corpus(in);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

CorpusSplit split_corpus(const Corpus& corpus, std::uint64_t seed, double dev_fraction, double test_fraction) {
  require(dev_fraction >= 0.0 && test_fraction >= 0.0 && dev_fraction + test_fraction < 1.0,
          "split_corpus: bad fractions");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(corpus.size());
  const auto n_dev = static_cast<std::size_t>(n * dev_fraction);
  const auto n_test = static_cast<std::size_t>(n * test_fraction);
  std::vector<std::size_t> dev(order.begin(), order.begin() + n_dev);
  std::vector<std::size_t> test(order.begin() + n_dev, order.begin() + n_dev + n_test);
  std::vector<std::size_t> train(order.begin() + n_dev + n_test, order.end());
  CorpusSplit out;
  for (auto* part : {&out.train, &out.dev, &out.test}) {
    part->vocab_size = corpus.vocab_size;
    part->frame_dim = corpus.frame_dim;
    part->vocab_checksum = corpus.vocab_checksum;
    part->prototype_checksum = corpus.prototype_checksum;
  }
  auto fill = [&](std::vector<std::size_t>& idx, Corpus& dst) {
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) dst.utterances.push_back(corpus.utterances[i]);
  };
  fill(train, out.train);
  fill(dev, out.dev);
  fill(test, out.test);
  return out;
}

std::vector<int> nearest_prototype_decode(const FrameMatrix& frames, const Language& language) {
  std::vector<int> out;
  const auto& protos = language.prototypes();
  for (Index f = 0; f < frames.rows(); ++f) {
    Index best = 0;
    (protos.rowwise() - frames.row(f)).rowwise().squaredNorm().minCoeff(&best);
    const int token = static_cast<int>(best) + Vocab::kReserved;
    if (out.empty() || out.back() != token) out.push_back(token);
  }
  return out;
}

}  // namespace gasr
