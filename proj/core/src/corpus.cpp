#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "flm/corpus.hpp"
#include "flm/error.hpp"

namespace flm {

std::vector<Document> read_jsonl(std::istream& in) {
  std::vector<Document> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Document d;
      d.id = j.contains("id") ? (j.at("id").is_string() ? j.at("id").get<std::string>()
                                                        : j.at("id").dump())
                              : std::to_string(docs.size());
      d.domain = j.value("domain", "");
      d.text = j.at("text").get<std::string>();
      docs.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

std::vector<Document> read_jsonl_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read " + path);
  try {
    return read_jsonl(in);
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

void write_jsonl(std::ostream& out, const std::vector<Document>& docs) {
  for (const auto& d : docs) {
    out << nlohmann::json{{"id", d.id}, {"domain", d.domain}, {"text", d.text}}.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------

namespace {

std::string normalize_paragraph(std::string_view p) {
  std::string out;
  for (auto w : split_words(p)) {
    if (!out.empty()) out.push_back(' ');
    for (char c : w) out.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c);
  }
  return out;
}

std::vector<std::string_view> split_paragraphs(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = text.find("\n\n", start);
    if (end == std::string_view::npos) {
      out.push_back(text.substr(start));
      break;
    }
    out.push_back(text.substr(start, end - start));
    start = end + 2;
  }
  return out;
}

}  // namespace

ParagraphDedupResult paragraph_dedup(const std::vector<Document>& docs) {
  ParagraphDedupResult r;
  std::unordered_set<std::string> seen;
  for (const auto& d : docs) {
    Document out = d;
    out.text.clear();
    bool first = true;
    for (auto p : split_paragraphs(d.text)) {
      std::string norm = normalize_paragraph(p);
      if (!norm.empty() && !seen.insert(std::move(norm)).second) {
        ++r.paragraphs_removed;
        continue;
      }
      if (!first) out.text += "\n\n";
      out.text += p;
      first = false;
    }
    r.docs.push_back(std::move(out));
  }
  return r;
}

// ---------------------------------------------------------------------------

void validate(const CorpusManifest& m) {
  if (m.domains.empty()) throw ConfigError("manifest: no domains");
  double sum = 0.0;
  std::unordered_set<std::string> names;
  for (const auto& d : m.domains) {
    if (d.name.empty()) throw ConfigError("manifest: domain without a name");
    if (!names.insert(d.name).second) throw ConfigError("manifest: duplicate domain " + d.name);
    if (!(d.sampling_prop >= 0.0)) throw ConfigError("manifest: " + d.name + ": negative sampling_prop");
    if (!(d.epochs > 0.0)) throw ConfigError("manifest: " + d.name + ": epochs must be > 0");
    if (d.token_estimate && !(*d.token_estimate >= 0.0)) {
      throw ConfigError("manifest: " + d.name + ": negative token_estimate");
    }
    sum += d.sampling_prop;
  }
  if (!(m.proportion_tolerance >= 0.0 && m.proportion_tolerance < 0.5)) {
    throw ConfigError("manifest: proportion_tolerance must be in [0, 0.5)");
  }
  if (std::abs(sum - 1.0) > m.proportion_tolerance) {
    throw ConfigError("manifest: sampling proportions sum to " + std::to_string(sum) + ", not 1");
  }
  if (m.total_token_budget < 0) throw ConfigError("manifest: negative total_token_budget");
}

void to_json(nlohmann::json& j, const CorpusManifest& m) {
  nlohmann::json domains = nlohmann::json::array();
  for (const auto& d : m.domains) {
    nlohmann::json dj = {{"name", d.name},
                         {"languages", d.languages},
                         {"path", d.path},
                         {"sampling_prop", d.sampling_prop},
                         {"epochs", d.epochs}};
    if (d.size_bytes) dj["size_bytes"] = *d.size_bytes;
    if (d.token_estimate) dj["token_estimate"] = *d.token_estimate;
    if (d.quality) dj["quality"] = *d.quality;
    domains.push_back(std::move(dj));
  }
  j = {{"domains", domains},
       {"total_token_budget", m.total_token_budget},
       {"proportion_tolerance", m.proportion_tolerance}};
}

void from_json(const nlohmann::json& j, CorpusManifest& m) {
  m = {};
  for (const auto& dj : j.at("domains")) {
    DomainSpec d;
    d.name = dj.at("name").get<std::string>();
    d.languages = dj.value("languages", std::vector<std::string>{});
    d.path = dj.value("path", "");
    d.sampling_prop = dj.at("sampling_prop").get<double>();
    d.epochs = dj.value("epochs", 1.0);
    if (dj.contains("size_bytes")) d.size_bytes = dj.at("size_bytes").get<double>();
    if (dj.contains("token_estimate")) d.token_estimate = dj.at("token_estimate").get<double>();
    if (dj.contains("quality")) d.quality = dj.at("quality").get<double>();
    m.domains.push_back(std::move(d));
  }
  m.total_token_budget = j.value("total_token_budget", std::int64_t{0});
  m.proportion_tolerance = j.value("proportion_tolerance", 1e-6);
}

CorpusManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read manifest " + path);
  CorpusManifest m;
  try {
    m = nlohmann::json::parse(in).get<CorpusManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest " + path + ": " + e.what());
  }
  validate(m);
  return m;
}

nlohmann::json SamplePlan::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& q : quotas) {
    nlohmann::json r = {{"domain", q.domain},
                        {"sampling_prop", q.sampling_prop},
                        {"quota", q.quota},
                        {"feasible", q.feasible}};
    r["available"] = q.available ? nlohmann::json(*q.available) : nlohmann::json(nullptr);
    rows.push_back(std::move(r));
  }
  return {{"total_tokens", total_tokens},
          {"assigned_tokens", assigned_tokens},
          {"quotas", rows},
          {"infeasible", infeasible}};
}

SamplePlan plan_quotas(const CorpusManifest& m, std::int64_t total_tokens) {
  validate(m);
  if (total_tokens < 0) throw InvalidArgument("sample_plan: total_tokens must be >= 0");
  SamplePlan plan;
  plan.total_tokens = total_tokens;
  std::int64_t assigned = 0;
  std::size_t largest = 0;
  for (std::size_t i = 0; i < m.domains.size(); ++i) {
    const auto& d = m.domains[i];
    DomainQuota q;
    q.domain = d.name;
    q.sampling_prop = d.sampling_prop;
    q.quota = std::llround(d.sampling_prop * static_cast<double>(total_tokens));
    assigned += q.quota;
    if (d.sampling_prop > m.domains[largest].sampling_prop) largest = i;
    plan.quotas.push_back(std::move(q));
  }
  const std::int64_t residue = total_tokens - assigned;
  if (std::abs(residue) <= static_cast<std::int64_t>(m.domains.size())) {
    plan.quotas[largest].quota += residue;
    assigned += residue;
  }
  plan.assigned_tokens = assigned;
  for (std::size_t i = 0; i < m.domains.size(); ++i) {
    const auto& d = m.domains[i];
    auto& q = plan.quotas[i];
    if (d.token_estimate) {
      q.available = d.epochs * *d.token_estimate;
      q.feasible = static_cast<double>(q.quota) <= *q.available;
      if (!q.feasible) plan.infeasible.push_back(d.name);
    }
  }
  return plan;
}

SamplePlan sample_plan(const CorpusManifest& m, std::int64_t total_tokens) {
  SamplePlan plan = plan_quotas(m, total_tokens);
  if (!plan.infeasible.empty()) {
    const auto& name = plan.infeasible.front();
    const auto it = std::find_if(plan.quotas.begin(), plan.quotas.end(),
                                 [&](const DomainQuota& q) { return q.domain == name; });
    throw PlanningError(name, "domain " + name + " needs " + std::to_string(it->quota) +
                                  " tokens but only " +
                                  std::to_string(std::llround(*it->available)) +
                                  " are available at its epoch cap");
  }
  return plan;
}

// ---------------------------------------------------------------------------

namespace {
constexpr TokenId kNoTarget = -1;
}  // namespace

PackedBatch pack(const std::vector<std::vector<TokenId>>& docs, const PackOptions& o) {
  if (o.context_length < 2) throw InvalidArgument("pack: context_length must be at least 2");
  const std::size_t ctx = o.context_length;
  PackedBatch out;
  out.seq = ctx;

  std::size_t col = 0;       // fill of the current row
  std::int32_t segment = -1;  // segment id within the current row
  auto open_row = [&] {
    out.rows += 1;
    col = 0;
    segment = -1;
  };
  auto pad_row = [&] {
    while (col < ctx && out.rows > 0) {
      out.tokens.push_back(o.pad_id);
      out.targets.push_back(kNoTarget);
      out.segments.push_back(-1);
      out.positions.push_back(0);
      ++col;
    }
  };

  std::vector<TokenId> doc;
  for (const auto& raw : docs) {
    doc.clear();
    if (o.bos_id) doc.push_back(*o.bos_id);
    doc.insert(doc.end(), raw.begin(), raw.end());
    if (doc.empty()) continue;

    if (out.rows == 0 || col == ctx) {
      open_row();
    } else if (o.policy == PackPolicy::whole_documents && col > 0 && doc.size() > ctx - col) {
      pad_row();
      open_row();
    }
    ++segment;
    std::int32_t pos = 0;
    for (std::size_t j = 0; j < doc.size(); ++j) {
      if (col == ctx) {
        open_row();
        segment = 0;
        pos = 0;
      }
      out.tokens.push_back(doc[j]);
      out.targets.push_back(j + 1 < doc.size() ? doc[j + 1] : kNoTarget);
      if (o.mask_across_documents) {
        out.segments.push_back(segment);
        out.positions.push_back(pos++);
      } else {
        out.segments.push_back(0);
        out.positions.push_back(static_cast<std::int32_t>(col));
      }
      ++col;
    }
  }
  pad_row();
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Contamination> find_contamination(const std::vector<Document>& test,
                                              const std::vector<Document>& train, std::size_t n) {
  if (n == 0) throw InvalidArgument("find_contamination: n must be positive");
  auto ngrams = [n](const std::string& text) {
    std::vector<std::string> out;
    const auto words = split_words(text);
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      std::string g;
      for (std::size_t k = 0; k < n; ++k) {
        if (k) g.push_back(' ');
        g.append(words[i + k]);
      }
      out.push_back(std::move(g));
    }
    return out;
  };
  std::unordered_map<std::string, std::size_t> index;  // n-gram -> first train doc
  for (std::size_t t = 0; t < train.size(); ++t) {
    for (auto& g : ngrams(train[t].text)) index.emplace(std::move(g), t);
  }
  std::vector<Contamination> out;
  for (const auto& doc : test) {
    std::unordered_map<std::size_t, std::size_t> hits;
    std::unordered_set<std::string> counted;
    for (auto& g : ngrams(doc.text)) {
      auto it = index.find(g);
      if (it != index.end() && counted.insert(g).second) ++hits[it->second];
    }
    std::vector<std::pair<std::size_t, std::size_t>> sorted(hits.begin(), hits.end());
    std::sort(sorted.begin(), sorted.end());
    for (auto [t, count] : sorted) out.push_back({doc.id, train[t].id, count});
  }
  return out;
}

}  // namespace flm
