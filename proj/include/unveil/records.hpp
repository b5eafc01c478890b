#pragma once

#include "unveil/core.hpp"
#include "unveil/synthworld.hpp"
#include "unveil/vocab.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace unveil {

enum class ReviewStatus { Pending, Accepted, Corrected, Rejected };

std::string to_string(ReviewStatus s);
ReviewStatus review_status_from_string(const std::string& s);

struct Provenance {
  std::string backend = "synthetic";
  std::string prompt_version;
  std::string raw;        // first-pass generation
  std::string reflected;  // after the reflection pass
  ReviewStatus review_status = ReviewStatus::Accepted;
};

/// One JSONL line. Images are not stored; they are regenerated from the generator
/// seed under the world config that produced the file.
struct BuiltRecord {
  Sample sample;
  std::string response_text;  // what training reads as the reference response
  Provenance provenance;
};

/// Record for a synthesized sample whose reference response is the canonical encoding.
BuiltRecord record_from_sample(const Sample& s, const Vocab& vocab);

nlohmann::json record_to_json(const BuiltRecord& r, const world::WorldConfig& cfg, const Vocab& vocab);
/// Rebuilds the sample (image included) and checks that the stored region and category
/// agree with the regenerated image; throws std::runtime_error on mismatch.
BuiltRecord record_from_json(const nlohmann::json& j, const world::WorldConfig& cfg, const Vocab& vocab);

void write_jsonl(const std::string& path, const std::vector<BuiltRecord>& records, const world::WorldConfig& cfg,
                 const Vocab& vocab);
std::vector<BuiltRecord> read_jsonl(const std::string& path, const world::WorldConfig& cfg, const Vocab& vocab);

void write_samples(const std::string& path, const std::vector<Sample>& samples, const world::WorldConfig& cfg);
std::vector<Sample> read_samples(const std::string& path, const world::WorldConfig& cfg);

/// Response text encoded for training, terminated by <eos>.
TokenSeq response_tokens(const Vocab& vocab, const std::string& text);

}  // namespace unveil
