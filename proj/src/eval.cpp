#include "unveil/eval.hpp"

#include "unveil/rewards.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace unveil::eval {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

void check_aligned(size_t a, size_t b) {
  if (a != b) throw std::invalid_argument("metrics: responses and samples are not aligned");
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (size_t i = 0; i < idx.size();) {
    size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

// Query without a trailing `hint bbox x1 y1 x2 y2` block.
TokenSeq base_query(const Sample& s, const Vocab& vocab) {
  TokenSeq q = s.query;
  if (q.size() >= 6 && q[q.size() - 6] == vocab.hint()) q.resize(q.size() - 6);
  return q;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

bool contains_category(const std::string& response_text, const std::string& category_name) {
  const std::string target = lower(category_name);
  if (target.empty()) return false;
  std::string tok;
  const std::string text = lower(response_text);
  for (size_t i = 0; i <= text.size(); ++i) {
    const bool boundary = i == text.size() || !std::isalnum(static_cast<unsigned char>(text[i]));
    if (!boundary) {
      tok.push_back(text[i]);
      continue;
    }
    if (tok == target) return true;
    tok.clear();
  }
  return false;
}

double acc_metric(const std::vector<std::string>& response_texts, const std::vector<Sample>& samples,
                  const Vocab& vocab) {
  check_aligned(response_texts.size(), samples.size());
  if (samples.empty()) return 0.0;
  int hits = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    hits += contains_category(response_texts[i], vocab.category_name(samples[i].gt_category));
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double acc_metric(const std::vector<Response>& responses, const std::vector<Sample>& samples, const Vocab& vocab) {
  std::vector<std::string> texts;
  texts.reserve(responses.size());
  for (const auto& r : responses) texts.push_back(vocab.decode(r.tokens));
  return acc_metric(texts, samples, vocab);
}

double mean_iou_metric(const std::vector<Response>& responses, const std::vector<Sample>& samples) {
  check_aligned(responses.size(), samples.size());
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  for (size_t i = 0; i < samples.size(); ++i) {
    sum += rewards::localization_reward(responses[i].parsed_bbox, samples[i].gt_bbox);
  }
  return sum / static_cast<double>(samples.size());
}

std::vector<Response> predict(const model::PolicyModel& model, const std::vector<Sample>& samples) {
  std::vector<Response> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(parse_response(model.vocab(), model::greedy_decode(model, s.image, s.query)));
  }
  return out;
}

SplitMetrics evaluate_split(const model::PolicyModel& model, const std::vector<Sample>& samples) {
  SplitMetrics m;
  m.n = static_cast<int>(samples.size());
  const auto responses = predict(model, samples);
  m.acc = acc_metric(responses, samples, model.vocab());
  m.mean_iou = mean_iou_metric(responses, samples);
  std::map<std::string, int> hits;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& name = model.vocab().category_name(samples[i].gt_category);
    ++m.per_category_n[name];
    hits[name] += contains_category(model.vocab().decode(responses[i].tokens), name);
  }
  for (const auto& [name, n] : m.per_category_n) m.per_category_acc[name] = static_cast<double>(hits[name]) / n;
  return m;
}

std::vector<CurveRow> run_injection_ablation(const model::PolicyModel& model, const std::vector<Sample>& samples,
                                             std::vector<double> iou_grid) {
  for (double t : iou_grid) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("injection: grid values must lie in [0,1]");
  }
  std::sort(iou_grid.begin(), iou_grid.end());
  const Vocab& vocab = model.vocab();
  std::vector<CurveRow> rows;
  for (double target : iou_grid) {
    CurveRow row;
    row.target_iou = target;
    std::vector<Response> responses;
    std::vector<Sample> used;
    double hint_iou = 0.0;
    for (const auto& s : samples) {
      BBox hint;
      try {
        hint = world::make_quantized_iou_hint(s.gt_bbox, target, s.image.width_patches, s.image.height_patches);
      } catch (const std::domain_error&) {
        ++row.skipped;
        continue;
      }
      TokenSeq q = base_query(s, vocab);
      const TokenSeq h = encode_hint(vocab, hint);
      q.insert(q.end(), h.begin(), h.end());
      responses.push_back(parse_response(vocab, model::greedy_decode(model, s.image, q)));
      used.push_back(s);
      hint_iou += iou(hint, s.gt_bbox);
    }
    row.n = static_cast<int>(used.size());
    row.acc = acc_metric(responses, used, vocab);
    row.mean_hint_iou = used.empty() ? 0.0 : hint_iou / static_cast<double>(used.size());
    rows.push_back(row);
  }
  return rows;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  const size_t n = x.size();
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["metadata"] = metadata;
  j["splits"] = nlohmann::json::object();
  for (const auto& [key, m] : splits) {
    j["splits"][key] = {{"acc", m.acc},
                        {"mean_iou", m.mean_iou},
                        {"n", m.n},
                        {"per_category_acc", m.per_category_acc},
                        {"per_category_n", m.per_category_n}};
  }
  j["curve"] = nlohmann::json::array();
  for (const auto& r : curve) {
    j["curve"].push_back({{"target_iou", r.target_iou},
                          {"acc", r.acc},
                          {"mean_hint_iou", r.mean_hint_iou},
                          {"n", r.n},
                          {"skipped", r.skipped}});
  }
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "split,acc,mean_iou,n\n";
  for (const auto& [key, m] : splits) os << key << ',' << fmt(m.acc) << ',' << fmt(m.mean_iou) << ',' << m.n << '\n';
  return os.str();
}

std::string EvalReport::summary_table() const {
  std::ostringstream os;
  os << std::left << std::setw(28) << "split" << std::setw(10) << "ACC" << std::setw(10) << "mIoU" << "n\n";
  for (const auto& [key, m] : splits) {
    os << std::left << std::setw(28) << key << std::setw(10) << std::fixed << std::setprecision(4) << m.acc
       << std::setw(10) << m.mean_iou << m.n << '\n';
  }
  return os.str();
}

std::string curve_csv(const std::vector<CurveRow>& rows) {
  std::ostringstream os;
  os << "target_iou,acc\n";
  for (const auto& r : rows) os << fmt(r.target_iou) << ',' << fmt(r.acc) << '\n';
  return os.str();
}

const GeneralizationRow& GeneralizationReport::find(const std::string& variant, const std::string& slice,
                                                    const std::string& method) const {
  for (const auto& r : rows) {
    if (r.variant == variant && r.slice == slice && r.method == method) return r;
  }
  throw std::out_of_range("generalization report: no row " + variant + "/" + slice + "/" + method);
}

std::string GeneralizationReport::to_csv() const {
  std::ostringstream os;
  os << "variant,slice,method,acc,mean_iou,n\n";
  for (const auto& r : rows) {
    os << r.variant << ',' << r.slice << ',' << r.method << ',' << fmt(r.acc) << ',' << fmt(r.mean_iou) << ',' << r.n
       << '\n';
  }
  return os.str();
}

GeneralizationReport run_generalization_suite(const TrainFn& train_fn, const std::vector<Sample>& samples,
                                              const world::WorldConfig& cfg, const std::vector<PlanVariant>& variants) {
  bool any_heldout = false;
  for (const auto& v : variants) {
    any_heldout |= !v.plan.heldout_category_families.empty() || !v.plan.heldout_dataset_families.empty();
  }
  if (!any_heldout) throw std::invalid_argument("generalization suite: no variant holds anything out");
  GeneralizationReport report;
  for (const auto& v : variants) {
    const auto split = world::apply_split(samples, v.plan, cfg);
    TrainedModels models;
    try {
      models = train_fn(split, v.label);
    } catch (const std::exception& e) {
      throw std::runtime_error("generalization run '" + v.label + "' failed: " + e.what());
    }
    int leaked = 0;
    std::map<std::string, std::vector<Sample>> slices;
    for (const auto& s : split) {
      const bool held = s.has_tag(world::kHeldoutCategory) || s.has_tag(world::kHeldoutDataset);
      if (held && models.trained_ids.count(s.id)) ++leaked;
      if (s.has_tag(world::kHeldoutCategory)) slices[world::kHeldoutCategory].push_back(s);
      if (s.has_tag(world::kHeldoutDataset)) slices[world::kHeldoutDataset].push_back(s);
      if (s.has_tag(world::kTest) && !held) slices[world::kTest].push_back(s);
    }
    report.leaked[v.label] = leaked;
    const std::vector<std::pair<std::string, const model::PolicyModel*>> methods = {
        {"aar", &models.aar}, {"sft", &models.sft}, {"untrained", &models.untrained}};
    for (const auto& [slice, members] : slices) {
      for (const auto& [method, m] : methods) {
        const auto metrics = evaluate_split(*m, members);
        report.rows.push_back({v.label, slice, method, metrics.acc, metrics.mean_iou, metrics.n});
      }
    }
  }
  return report;
}

}  // namespace unveil::eval
