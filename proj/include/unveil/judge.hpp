#pragma once

#include "unveil/core.hpp"
#include "unveil/http.hpp"
#include "unveil/vocab.hpp"

#include <atomic>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>

namespace unveil::rewards {

struct JudgeVerdict {
  double score = 0.0;  // in [0,1]
  std::string rationale;
};

class JudgeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Source of the relevance reward channel.
class RelevanceJudge {
 public:
  virtual ~RelevanceJudge() = default;
  virtual JudgeVerdict judge(const Response& response, const Sample& sample, const Vocab& vocab) = 0;
  virtual std::string id() const = 0;
};

struct RubricWeights {
  double schema_valid = 0.2;
  double correct_category = 0.6;
  double bbox_present = 0.2;
};

/// Rule-based judge: schema validity, category correctness and bbox presence, additive.
class ReferenceJudge final : public RelevanceJudge {
 public:
  explicit ReferenceJudge(RubricWeights w = {}) : w_(w) {}
  JudgeVerdict judge(const Response& response, const Sample& sample, const Vocab& vocab) override;
  std::string id() const override { return "reference"; }

 private:
  RubricWeights w_;
};

/// Remote judge. Request {query_text, response_text, reference_text}; reply
/// {score in [0,1], rationale}. Transport failures and bad replies raise JudgeError.
class HttpJudge final : public RelevanceJudge {
 public:
  HttpJudge(std::string url, int timeout_ms) : url_(std::move(url)), timeout_ms_(timeout_ms) {}
  JudgeVerdict judge(const Response& response, const Sample& sample, const Vocab& vocab) override;
  std::string id() const override { return "http:" + url_; }

 private:
  std::string url_;
  int timeout_ms_;
};

/// Uses `primary`, and on JudgeError answers with `fallback` instead.
class FallbackJudge final : public RelevanceJudge {
 public:
  FallbackJudge(std::unique_ptr<RelevanceJudge> primary, std::unique_ptr<RelevanceJudge> fallback)
      : primary_(std::move(primary)), fallback_(std::move(fallback)) {}
  JudgeVerdict judge(const Response& response, const Sample& sample, const Vocab& vocab) override;
  std::string id() const override { return primary_->id() + "|" + fallback_->id(); }
  int fallbacks() const { return fallbacks_; }

 private:
  std::unique_ptr<RelevanceJudge> primary_;
  std::unique_ptr<RelevanceJudge> fallback_;
  int fallbacks_ = 0;
};

inline JudgeVerdict relevance_judge(const Response& response, const Sample& sample, const Vocab& vocab,
                                    RelevanceJudge& backend) {
  return backend.judge(response, sample, vocab);
}

/// Loopback judge endpoint replaying canned verdicts keyed by response_text;
/// unknown responses get `default_verdict`.
class MockJudgeServer {
 public:
  explicit MockJudgeServer(std::map<std::string, JudgeVerdict> canned = {}, JudgeVerdict default_verdict = {0.5, "default"});
  std::string url() const { return server_.url() + "/judge"; }
  http::LocalJsonServer& server() { return server_; }
  int requests() const { return requests_->load(); }

 private:
  std::shared_ptr<std::atomic<int>> requests_;
  http::LocalJsonServer server_;
};

}  // namespace unveil::rewards
