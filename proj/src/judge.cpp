#include "unveil/judge.hpp"

#include <cmath>

namespace unveil::rewards {

JudgeVerdict ReferenceJudge::judge(const Response& response, const Sample& sample, const Vocab& vocab) {
  (void)vocab;
  JudgeVerdict v;
  std::string why;
  if (response.schema_valid) {
    v.score += w_.schema_valid;
    why += "schema ok; ";
  }
  if (response.parsed_category && *response.parsed_category == sample.gt_category) {
    v.score += w_.correct_category;
    why += "category correct; ";
  }
  if (response.parsed_bbox) {
    v.score += w_.bbox_present;
    why += "bbox present; ";
  }
  v.rationale = why.empty() ? "unparsable" : why;
  return v;
}

JudgeVerdict HttpJudge::judge(const Response& response, const Sample& sample, const Vocab& vocab) {
  const nlohmann::json req = {{"query_text", vocab.decode(sample.query)},
                              {"response_text", vocab.decode(response.tokens)},
                              {"reference_text", vocab.decode(sample.reference_response)}};
  nlohmann::json reply;
  try {
    reply = http::post_json(url_, req, timeout_ms_);
  } catch (const std::exception& e) {
    throw JudgeError(std::string("judge transport: ") + e.what());
  }
  if (!reply.is_object() || !reply.contains("score") || !reply["score"].is_number()) {
    throw JudgeError("judge reply malformed: missing numeric score");
  }
  const double score = reply["score"].get<double>();
  if (!std::isfinite(score) || score < 0.0 || score > 1.0) throw JudgeError("judge reply malformed: score outside [0,1]");
  return {score, reply.value("rationale", std::string{})};
}

JudgeVerdict FallbackJudge::judge(const Response& response, const Sample& sample, const Vocab& vocab) {
  try {
    return primary_->judge(response, sample, vocab);
  } catch (const JudgeError&) {
    ++fallbacks_;
    return fallback_->judge(response, sample, vocab);
  }
}

MockJudgeServer::MockJudgeServer(std::map<std::string, JudgeVerdict> canned, JudgeVerdict default_verdict)
    : requests_(std::make_shared<std::atomic<int>>(0)),
      server_("/judge", [canned = std::move(canned), default_verdict, counter = requests_](const nlohmann::json& req) {
        ++*counter;
        const auto text = req.at("response_text").get<std::string>();
        auto it = canned.find(text);
        const JudgeVerdict& v = it == canned.end() ? default_verdict : it->second;
        return nlohmann::json{{"score", v.score}, {"rationale", v.rationale}};
      }) {}

}  // namespace unveil::rewards
