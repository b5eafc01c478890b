#pragma once

#include "unveil/core.hpp"
#include "unveil/records.hpp"
#include "unveil/synthworld.hpp"
#include "unveil/vocab.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace unveil::mau {

class MissingSlot : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Replaces every `{{name}}` in `tmpl`. Throws MissingSlot naming the first slot
/// without a value.
std::string fill_template(const std::string& tmpl, const std::map<std::string, std::string>& slots);

struct PromptBundle {
  std::string diagnosis_template;   // slots: image, category, bbox
  std::string reflection_template;  // slot: response
  std::string version;

  static PromptBundle defaults();
  nlohmann::json to_json() const;
  static PromptBundle from_json(const nlohmann::json& j);
};

struct GenerationRequest {
  std::string prompt;
  std::string prior_response;  // reflection passes only
  nlohmann::json attachments;  // verbalized image inputs
};

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationBackend {
 public:
  virtual ~GenerationBackend() = default;
  virtual std::string generate(const GenerationRequest& req) = 0;
  virtual std::string id() const = 0;
};

/// Deterministic text-only backend. Diagnosis text is canned per (category, bbox) in one
/// of several segment orders; reflection re-emits the parsed content in canonical order.
class MockBackend final : public GenerationBackend {
 public:
  explicit MockBackend(Vocab vocab) : vocab_(std::move(vocab)) {}
  std::string generate(const GenerationRequest& req) override;
  std::string id() const override { return "mock"; }
  const Vocab& vocab() const { return vocab_; }

 private:
  Vocab vocab_;
};

/// Remote backend. POST {query_text, response_text, reference_text, attachments};
/// reply {text}. Each request is retried up to `retries` extra times.
class HttpBackend final : public GenerationBackend {
 public:
  HttpBackend(std::string url, int timeout_ms, int retries) : url_(std::move(url)), timeout_ms_(timeout_ms), retries_(retries) {}
  std::string generate(const GenerationRequest& req) override;
  std::string id() const override { return "http:" + url_; }

 private:
  std::string url_;
  int timeout_ms_;
  int retries_;
};

/// Loopback endpoint serving the HttpBackend contract with MockBackend answers.
class MockGenerationServer {
 public:
  explicit MockGenerationServer(Vocab vocab);
  ~MockGenerationServer();
  std::string url() const;
  class Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

struct DiagnosisInputs {
  std::string image_descriptor;
  std::string category;
  BBox bbox;
};

DiagnosisInputs diagnosis_inputs(const Sample& s, const world::WorldConfig& cfg, const Vocab& vocab);

/// Ground-truth-conditioned first pass. Throws BackendError on transport failure or empty text.
std::string build_diagnosis(const DiagnosisInputs& in, const PromptBundle& prompts, GenerationBackend& backend);

/// Restructuring pass into detection, bbox, category order. Throws std::invalid_argument
/// on empty input and BackendError on transport failure.
std::string reflect(const std::string& raw, const PromptBundle& prompts, GenerationBackend& backend);

struct ReviewRules {
  double min_iou = 0.99;
};

struct AuditEntry {
  std::string id;
  ReviewStatus decision = ReviewStatus::Pending;
  std::string reason;
};

struct ReviewOutcome {
  std::vector<BuiltRecord> accepted;
  std::vector<BuiltRecord> rejected;
  std::vector<AuditEntry> audit;
};

/// Automated review: a record passes when its response parses with the ground-truth
/// category and a bbox at iou >= min_iou. Already corrected records are kept as is.
ReviewOutcome review_filter(std::vector<BuiltRecord> records, const Vocab& vocab, const ReviewRules& rules = {});

struct PipelineOptions {
  int max_in_flight = 4;
  ReviewRules rules;
};

struct PipelineResult {
  std::vector<BuiltRecord> records;  // input order; status pending, accepted or rejected
  std::vector<AuditEntry> audit;
};

/// build -> reflect -> review for every sample. A backend failure leaves that record
/// pending with the error in the audit log. Output order and content do not depend on
/// request scheduling.
PipelineResult run_pipeline(const std::vector<Sample>& samples, const world::WorldConfig& cfg,
                            const PromptBundle& prompts, GenerationBackend& backend, const PipelineOptions& opts = {});

std::string audit_csv(const std::vector<AuditEntry>& audit);

}  // namespace unveil::mau
