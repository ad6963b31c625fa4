#include "gasr/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "gasr/checksum.hpp"
#include "gasr/parallel.hpp"

namespace gasr {

using nlohmann::json;

namespace {

double percent(long count, long total) { return 100.0 * static_cast<double>(count) / static_cast<double>(std::max(total, 1L)); }

json summary_json(const ErrorSummary& s) {
  return json{{"utterances", s.utterances}, {"ref_tokens", s.ref_tokens},   {"substitutions", s.substitutions},
              {"deletions", s.deletions},   {"insertions", s.insertions},   {"wer", s.wer()},
              {"sub_rate", s.sub_rate()},   {"del_rate", s.del_rate()},     {"ins_rate", s.ins_rate()}};
}

ErrorSummary summary_from_json(const json& j) {
  ErrorSummary s;
  s.utterances = j.at("utterances").get<long>();
  s.ref_tokens = j.at("ref_tokens").get<long>();
  s.substitutions = j.at("substitutions").get<long>();
  s.deletions = j.at("deletions").get<long>();
  s.insertions = j.at("insertions").get<long>();
  return s;
}

std::string join_tokens(const std::vector<int>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

std::vector<int> split_tokens(const std::string& text) {
  std::vector<int> out;
  std::istringstream in(text);
  int t;
  while (in >> t) out.push_back(t);
  return out;
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, v);
  return buf;
}

json delta_json(const SummaryDelta& d) {
  json j{{"utterances", d.utterances}, {"ref_tokens", d.ref_tokens}, {"substitutions", d.substitutions},
         {"deletions", d.deletions},   {"insertions", d.insertions}, {"wer", d.wer},
         {"sub_rate", d.sub_rate},     {"del_rate", d.del_rate},     {"ins_rate", d.ins_rate}};
  if (d.relative_wer_change) {
    j["relative_wer_change"] = *d.relative_wer_change;
  } else {
    j["relative_wer_change"] = "undefined";
  }
  return j;
}

}  // namespace

void ErrorSummary::add(const AlignmentStats& stats) {
  ++utterances;
  ref_tokens += stats.ref_len;
  substitutions += stats.substitutions;
  deletions += stats.deletions;
  insertions += stats.insertions;
}

double ErrorSummary::wer() const { return percent(errors(), ref_tokens); }
double ErrorSummary::sub_rate() const { return percent(substitutions, ref_tokens); }
double ErrorSummary::del_rate() const { return percent(deletions, ref_tokens); }
double ErrorSummary::ins_rate() const { return percent(insertions, ref_tokens); }

ErrorSummary pool(const std::vector<UtteranceResult>& utterances, std::optional<Domain> domain) {
  ErrorSummary s;
  for (const auto& u : utterances) {
    if (!domain || u.domain == *domain) s.add(u.stats);
  }
  return s;
}

EvalReport evaluate(const Corpus& corpus, const TranscriptDecoder& decoder, const DecodeSettings& settings,
                    int workers, std::size_t worst_k) {
  require(corpus.size() > 0, "evaluate: corpus is empty");
  EvalReport report;
  report.decode = settings;
  report.utterances.resize(corpus.size());
  detail::parallel_for(corpus.size(), workers, [&](std::size_t i) {
    const Utterance& u = corpus.utterances[i];
    UtteranceResult& r = report.utterances[i];
    r.id = u.id;
    r.domain = u.domain;
    r.reference = u.transcript;
    r.hypothesis = strip_eos(decoder(u));
    r.stats = align(r.reference, r.hypothesis);
    r.stats.path.clear();
  });
  report.overall = pool(report.utterances);
  for (Domain d : {Domain::kClean, Domain::kOod}) {
    ErrorSummary s = pool(report.utterances, d);
    if (s.utterances > 0) report.domains[to_string(d)] = s;
  }
  std::vector<std::size_t> order(report.utterances.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return report.utterances[a].stats.insertions > report.utterances[b].stats.insertions;
  });
  order.resize(std::min(worst_k, order.size()));
  report.worst = std::move(order);
  return report;
}

template <typename S>
EvalReport evaluate(const PolicyModel<S>& model, const Corpus& corpus, const DecodeSettings& settings, int workers,
                    std::size_t worst_k) {
  const TranscriptDecoder decoder = [&](const Utterance& u) {
    // Sampling seeds derive from the utterance id so results do not depend on order.
    Fnv1a h;
    h.update(u.id);
    return decode(model, u.prompt, settings, h.digest()).tokens;
  };
  return evaluate(corpus, decoder, settings, workers, worst_k);
}

std::string EvalReport::to_json() const {
  json j;
  j["decode"] = {{"mode", to_string(decode.mode)},
                 {"temperature", decode.temperature},
                 {"beam_size", decode.beam_size},
                 {"max_len", decode.max_len}};
  j["overall"] = summary_json(overall);
  j["domains"] = json::object();
  for (const auto& [name, s] : domains) j["domains"][name] = summary_json(s);
  j["worst"] = json::array();
  for (std::size_t i : worst) {
    const auto& u = utterances[i];
    j["worst"].push_back({{"id", u.id},
                          {"insertions", u.stats.insertions},
                          {"deletions", u.stats.deletions},
                          {"substitutions", u.stats.substitutions},
                          {"ref", join_tokens(u.reference)},
                          {"hyp", join_tokens(u.hypothesis)}});
  }
  j["utterances"] = json::array();
  for (const auto& u : utterances) {
    j["utterances"].push_back({{"id", u.id},
                               {"domain", to_string(u.domain)},
                               {"ref", join_tokens(u.reference)},
                               {"hyp", join_tokens(u.hypothesis)},
                               {"ref_tokens", u.stats.ref_len},
                               {"substitutions", u.stats.substitutions},
                               {"deletions", u.stats.deletions},
                               {"insertions", u.stats.insertions}});
  }
  return j.dump();
}

EvalReport EvalReport::from_json(const std::string& text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    const auto& d = j.at("decode");
    r.decode.mode = parse_decode_mode(d.at("mode").get<std::string>());
    r.decode.temperature = d.at("temperature").get<double>();
    r.decode.beam_size = d.at("beam_size").get<int>();
    r.decode.max_len = d.at("max_len").get<int>();
    r.overall = summary_from_json(j.at("overall"));
    for (const auto& [name, s] : j.at("domains").items()) r.domains[name] = summary_from_json(s);
    std::map<std::string, std::size_t> index;
    for (const auto& u : j.at("utterances")) {
      UtteranceResult res;
      res.id = u.at("id").get<std::string>();
      res.domain = parse_domain(u.at("domain").get<std::string>());
      res.reference = split_tokens(u.at("ref").get<std::string>());
      res.hypothesis = split_tokens(u.at("hyp").get<std::string>());
      res.stats.ref_len = u.at("ref_tokens").get<long>();
      res.stats.substitutions = u.at("substitutions").get<long>();
      res.stats.deletions = u.at("deletions").get<long>();
      res.stats.insertions = u.at("insertions").get<long>();
      index[res.id] = r.utterances.size();
      r.utterances.push_back(std::move(res));
    }
    for (const auto& w : j.at("worst")) {
      const auto it = index.find(w.at("id").get<std::string>());
      if (it == index.end()) throw ParseError("worst-offender id not among utterances");
      r.worst.push_back(it->second);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  } catch (const ContractError& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  }
  return r;
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out << "decode: " << decode.describe() << "\n";
  auto line = [&](const std::string& name, const ErrorSummary& s) {
    out << name << ": utterances=" << s.utterances << " ref_tokens=" << s.ref_tokens << " WER=" << fmt("%.2f", s.wer())
        << "% Ins=" << fmt("%.2f", s.ins_rate()) << "% Del=" << fmt("%.2f", s.del_rate())
        << "% Sub=" << fmt("%.2f", s.sub_rate()) << "%\n";
  };
  line("overall", overall);
  for (const auto& [name, s] : domains) line(name, s);
  if (!worst.empty()) out << "most insertions:\n";
  for (std::size_t i : worst) {
    const auto& u = utterances[i];
    out << "  " << u.id << " ins=" << u.stats.insertions << " del=" << u.stats.deletions
        << " sub=" << u.stats.substitutions << "\n    ref: " << join_tokens(u.reference)
        << "\n    hyp: " << join_tokens(u.hypothesis) << "\n";
  }
  return out.str();
}

SummaryDelta compare(const ErrorSummary& a, const ErrorSummary& b) {
  SummaryDelta d;
  d.utterances = b.utterances - a.utterances;
  d.ref_tokens = b.ref_tokens - a.ref_tokens;
  d.substitutions = b.substitutions - a.substitutions;
  d.deletions = b.deletions - a.deletions;
  d.insertions = b.insertions - a.insertions;
  d.wer = b.wer() - a.wer();
  d.sub_rate = b.sub_rate() - a.sub_rate();
  d.del_rate = b.del_rate() - a.del_rate();
  d.ins_rate = b.ins_rate() - a.ins_rate();
  if (a.wer() > 0.0) {
    d.relative_wer_change = (b.wer() - a.wer()) / a.wer();
  } else if (b.wer() == 0.0) {
    d.relative_wer_change = 0.0;
  }
  return d;
}

CompareReport compare(const EvalReport& a, const EvalReport& b) {
  CompareReport r;
  r.overall = compare(a.overall, b.overall);
  for (const auto& [name, s] : a.domains) {
    const auto it = b.domains.find(name);
    if (it != b.domains.end()) r.domains[name] = compare(s, it->second);
  }
  return r;
}

std::string CompareReport::to_json() const {
  json j;
  j["overall"] = delta_json(overall);
  j["domains"] = json::object();
  for (const auto& [name, d] : domains) j["domains"][name] = delta_json(d);
  return j.dump();
}

std::string CompareReport::to_text() const {
  std::ostringstream out;
  auto line = [&](const std::string& name, const SummaryDelta& d) {
    out << name << ": dWER=" << fmt("%+.2f", d.wer) << " dIns=" << fmt("%+.2f", d.ins_rate)
        << " dDel=" << fmt("%+.2f", d.del_rate) << " dSub=" << fmt("%+.2f", d.sub_rate) << " relative=";
    if (d.relative_wer_change) {
      out << fmt("%+.2f", 100.0 * *d.relative_wer_change) << "%";
    } else {
      out << "undefined";
    }
    out << "\n";
  };
  line("overall", overall);
  for (const auto& [name, d] : domains) line(name, d);
  return out.str();
}

template EvalReport evaluate(const PolicyModel<float>&, const Corpus&, const DecodeSettings&, int, std::size_t);
template EvalReport evaluate(const PolicyModel<double>&, const Corpus&, const DecodeSettings&, int, std::size_t);

}  // namespace gasr
