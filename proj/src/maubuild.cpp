#include "unveil/maubuild.hpp"

#include "unveil/http.hpp"

#include <atomic>
#include <cmath>
#include <regex>
#include <sstream>
#include <thread>

namespace unveil::mau {

using nlohmann::json;

std::string fill_template(const std::string& tmpl, const std::map<std::string, std::string>& slots) {
  static const std::regex slot_re(R"(\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\})");
  std::string out;
  auto begin = std::sregex_iterator(tmpl.begin(), tmpl.end(), slot_re);
  size_t last = 0;
  for (auto it = begin; it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    const auto found = slots.find(m[1].str());
    if (found == slots.end()) throw MissingSlot("prompt slot '" + m[1].str() + "' has no value");
    out.append(tmpl, last, static_cast<size_t>(m.position(0)) - last);
    out += found->second;
    last = static_cast<size_t>(m.position(0) + m.length(0));
  }
  out.append(tmpl, last, std::string::npos);
  return out;
}

PromptBundle PromptBundle::defaults() {
  return {"Image: {{image}}. The abnormal area is {{bbox}} and the confirmed diagnosis is {{category}}. "
          "Write a diagnosis that states the abnormality, its bounding box and its category.",
          "Rewrite the diagnosis so that it first reports the abnormality, then the bounding box, then the "
          "category: {{response}}",
          "v1"};
}

json PromptBundle::to_json() const {
  return {{"diagnosis_template", diagnosis_template}, {"reflection_template", reflection_template}, {"version", version}};
}

PromptBundle PromptBundle::from_json(const json& j) {
  PromptBundle p = defaults();
  if (j.contains("diagnosis_template")) p.diagnosis_template = j.at("diagnosis_template").get<std::string>();
  if (j.contains("reflection_template")) p.reflection_template = j.at("reflection_template").get<std::string>();
  if (j.contains("version")) p.version = j.at("version").get<std::string>();
  return p;
}

namespace {

std::string coords(const BBox& b) {
  std::ostringstream os;
  os << std::lround(b.x1) << ' ' << std::lround(b.y1) << ' ' << std::lround(b.x2) << ' ' << std::lround(b.y2);
  return os.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string canonical_text(const Vocab& vocab, int category, const BBox& b) {
  TokenSeq t = encode_response(vocab, category, b);
  t.pop_back();  // <eos>
  return vocab.decode(t);
}

}  // namespace

std::string MockBackend::generate(const GenerationRequest& req) {
  if (!req.prior_response.empty()) {
    const Response r = parse_response(vocab_, vocab_.encode(req.prior_response));
    if (!r.schema_valid) return req.prior_response;
    return canonical_text(vocab_, *r.parsed_category, *r.parsed_bbox);
  }
  const auto& a = req.attachments;
  if (!a.is_object() || !a.contains("category") || !a.contains("region")) {
    throw BackendError("mock backend: diagnosis request without category/region attachments");
  }
  const std::string cat = a.at("category").get<std::string>();
  const auto reg = a.at("region").get<std::vector<double>>();
  const BBox b(reg.at(0), reg.at(1), reg.at(2), reg.at(3));
  const std::string box = "bbox " + coords(b);
  switch (fnv1a(cat + ' ' + coords(b)) % 3) {
    case 0: return "abnormality " + box + " category " + cat;
    case 1: return "category " + cat + " abnormality " + box;
    default: return "abnormality category " + cat + " " + box;
  }
}

std::string HttpBackend::generate(const GenerationRequest& req) {
  const json body = {{"query_text", req.prompt},
                     {"response_text", req.prior_response},
                     {"reference_text", ""},
                     {"attachments", req.attachments.is_null() ? json::object() : req.attachments}};
  std::string last_error;
  for (int attempt = 0; attempt <= retries_; ++attempt) {
    try {
      const json reply = http::post_json(url_, body, timeout_ms_);
      if (!reply.is_object() || !reply.contains("text") || !reply["text"].is_string()) {
        throw BackendError("generation reply malformed: missing text");
      }
      return reply["text"].get<std::string>();
    } catch (const BackendError&) {
      throw;
    } catch (const std::exception& e) {
      last_error = e.what();
    }
  }
  throw BackendError("generation backend unavailable: " + last_error);
}

class MockGenerationServer::Impl {
 public:
  explicit Impl(Vocab vocab)
      : backend(std::move(vocab)), server("/generate", [this](const json& req) {
          GenerationRequest g;
          g.prompt = req.value("query_text", std::string{});
          g.prior_response = req.value("response_text", std::string{});
          g.attachments = req.value("attachments", json::object());
          return json{{"text", backend.generate(g)}};
        }) {}
  MockBackend backend;
  http::LocalJsonServer server;
};

MockGenerationServer::MockGenerationServer(Vocab vocab) : impl_(std::make_unique<Impl>(std::move(vocab))) {}
MockGenerationServer::~MockGenerationServer() = default;
std::string MockGenerationServer::url() const { return impl_->server.url() + "/generate"; }

DiagnosisInputs diagnosis_inputs(const Sample& s, const world::WorldConfig& cfg, const Vocab& vocab) {
  std::ostringstream d;
  d << cfg.datasets.at(static_cast<size_t>(s.dataset_family)).name << " image on a " << s.image.height_patches << "x"
    << s.image.width_patches << " patch grid";
  return {d.str(), vocab.category_name(s.gt_category), s.gt_bbox};
}

std::string build_diagnosis(const DiagnosisInputs& in, const PromptBundle& prompts, GenerationBackend& backend) {
  GenerationRequest req;
  req.prompt = fill_template(prompts.diagnosis_template,
                             {{"image", in.image_descriptor}, {"category", in.category}, {"bbox", coords(in.bbox)}});
  req.attachments = {{"image", in.image_descriptor},
                     {"category", in.category},
                     {"region", {in.bbox.x1, in.bbox.y1, in.bbox.x2, in.bbox.y2}}};
  std::string text;
  try {
    text = backend.generate(req);
  } catch (const BackendError&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError(e.what());
  }
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw BackendError("backend returned an empty diagnosis");
  return text;
}

std::string reflect(const std::string& raw, const PromptBundle& prompts, GenerationBackend& backend) {
  if (raw.find_first_not_of(" \t\r\n") == std::string::npos) throw std::invalid_argument("reflect: empty response");
  GenerationRequest req;
  req.prompt = fill_template(prompts.reflection_template, {{"response", raw}});
  req.prior_response = raw;
  try {
    return backend.generate(req);
  } catch (const BackendError&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError(e.what());
  }
}

ReviewOutcome review_filter(std::vector<BuiltRecord> records, const Vocab& vocab, const ReviewRules& rules) {
  ReviewOutcome out;
  for (auto& r : records) {
    AuditEntry a{r.sample.id, ReviewStatus::Accepted, "matches ground truth"};
    if (r.provenance.review_status == ReviewStatus::Corrected) {
      a = {r.sample.id, ReviewStatus::Corrected, "manually corrected; kept"};
    } else {
      const Response p = parse_response(vocab, vocab.encode(r.response_text));
      if (!p.schema_valid) {
        a = {r.sample.id, ReviewStatus::Rejected, "response fails the schema"};
      } else if (*p.parsed_category != r.sample.gt_category) {
        a = {r.sample.id, ReviewStatus::Rejected,
             "category " + vocab.category_name(*p.parsed_category) + " != " + vocab.category_name(r.sample.gt_category)};
      } else if (const double v = iou(*p.parsed_bbox, r.sample.gt_bbox); v < rules.min_iou) {
        a = {r.sample.id, ReviewStatus::Rejected, "bbox iou " + std::to_string(v) + " below threshold"};
      }
      r.provenance.review_status = a.decision;
    }
    out.audit.push_back(a);
    (a.decision == ReviewStatus::Rejected ? out.rejected : out.accepted).push_back(std::move(r));
  }
  return out;
}

PipelineResult run_pipeline(const std::vector<Sample>& samples, const world::WorldConfig& cfg,
                            const PromptBundle& prompts, GenerationBackend& backend, const PipelineOptions& opts) {
  const Vocab vocab = cfg.make_vocab();
  const size_t n = samples.size();
  std::vector<BuiltRecord> records(n);
  std::vector<std::string> errors(n);
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next++; i < n; i = next++) {
      BuiltRecord& r = records[i];
      r.sample = samples[i];
      r.provenance.backend = backend.id();
      r.provenance.prompt_version = prompts.version;
      r.provenance.review_status = ReviewStatus::Pending;
      try {
        r.provenance.raw = build_diagnosis(diagnosis_inputs(samples[i], cfg, vocab), prompts, backend);
        r.provenance.reflected = reflect(r.provenance.raw, prompts, backend);
        r.response_text = r.provenance.reflected;
        r.sample.reference_response = response_tokens(vocab, r.response_text);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(opts.max_in_flight, static_cast<int>(n)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  PipelineResult out;
  for (size_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) {
      out.audit.push_back({records[i].sample.id, ReviewStatus::Pending, "backend error: " + errors[i]});
      out.records.push_back(std::move(records[i]));
      continue;
    }
    auto reviewed = review_filter({std::move(records[i])}, vocab, opts.rules);
    out.audit.push_back(reviewed.audit.front());
    out.records.push_back(reviewed.accepted.empty() ? std::move(reviewed.rejected.front())
                                                    : std::move(reviewed.accepted.front()));
  }
  return out;
}

std::string audit_csv(const std::vector<AuditEntry>& audit) {
  std::ostringstream os;
  os << "id,decision,reason\n";
  for (const auto& a : audit) {
    std::string reason = a.reason;
    for (auto& c : reason) {
      if (c == ',' || c == '\n') c = ';';
    }
    os << a.id << ',' << to_string(a.decision) << ',' << reason << '\n';
  }
  return os.str();
}

}  // namespace unveil::mau
