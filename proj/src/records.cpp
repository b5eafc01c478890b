#include "unveil/records.hpp"

#include <fstream>
#include <stdexcept>

namespace unveil {

using nlohmann::json;

std::string to_string(ReviewStatus s) {
  switch (s) {
    case ReviewStatus::Pending: return "pending";
    case ReviewStatus::Accepted: return "accepted";
    case ReviewStatus::Corrected: return "corrected";
    case ReviewStatus::Rejected: return "rejected";
  }
  return "pending";
}

ReviewStatus review_status_from_string(const std::string& s) {
  if (s == "pending") return ReviewStatus::Pending;
  if (s == "accepted") return ReviewStatus::Accepted;
  if (s == "corrected") return ReviewStatus::Corrected;
  if (s == "rejected") return ReviewStatus::Rejected;
  throw std::invalid_argument("unknown review status '" + s + "'");
}

TokenSeq response_tokens(const Vocab& vocab, const std::string& text) {
  TokenSeq t = vocab.encode(text);
  if (t.empty() || t.back() != Vocab::kEos) t.push_back(Vocab::kEos);
  return t;
}

BuiltRecord record_from_sample(const Sample& s, const Vocab& vocab) {
  BuiltRecord r;
  r.sample = s;
  TokenSeq body = s.reference_response;
  if (!body.empty() && body.back() == Vocab::kEos) body.pop_back();
  r.response_text = vocab.decode(body);
  r.provenance.raw = r.response_text;
  r.provenance.reflected = r.response_text;
  return r;
}

json record_to_json(const BuiltRecord& r, const world::WorldConfig& cfg, const Vocab& vocab) {
  const Sample& s = r.sample;
  const auto& b = s.gt_bbox;
  return {{"id", s.id},
          {"image",
           {{"h", s.image.height_patches},
            {"w", s.image.width_patches},
            {"generator_seed", s.generator_seed},
            {"region", {b.x1, b.y1, b.x2, b.y2}},
            {"category", vocab.category_name(s.gt_category)},
            {"dataset_family", cfg.datasets.at(static_cast<size_t>(s.dataset_family)).name}}},
          {"query", vocab.decode(s.query)},
          {"response", r.response_text},
          {"provenance",
           {{"backend", r.provenance.backend},
            {"prompt_version", r.provenance.prompt_version},
            {"raw", r.provenance.raw},
            {"reflected", r.provenance.reflected},
            {"review_status", to_string(r.provenance.review_status)}}},
          {"split_tags", std::vector<std::string>(s.split_tags.begin(), s.split_tags.end())}};
}

BuiltRecord record_from_json(const json& j, const world::WorldConfig& cfg, const Vocab& vocab) {
  BuiltRecord r;
  const std::string id = j.at("id").get<std::string>();
  const json& img = j.at("image");
  r.sample = world::generate_sample(cfg, vocab, img.at("generator_seed").get<std::uint64_t>(), id);
  const auto region = img.at("region").get<std::vector<double>>();
  if (region.size() != 4) throw std::runtime_error("record " + id + ": region needs 4 numbers");
  const BBox stored(region[0], region[1], region[2], region[3]);
  if (!(stored == r.sample.gt_bbox) || img.at("category").get<std::string>() != vocab.category_name(r.sample.gt_category) ||
      img.at("h").get<int>() != r.sample.image.height_patches || img.at("w").get<int>() != r.sample.image.width_patches) {
    throw std::runtime_error("record " + id + ": image does not match the world config (wrong config for this file?)");
  }
  r.sample.query = vocab.encode(j.at("query").get<std::string>());
  r.response_text = j.at("response").get<std::string>();
  r.sample.reference_response = response_tokens(vocab, r.response_text);
  r.sample.split_tags.clear();
  for (const auto& t : j.at("split_tags")) r.sample.split_tags.insert(t.get<std::string>());
  const json& p = j.at("provenance");
  r.provenance.backend = p.at("backend").get<std::string>();
  r.provenance.prompt_version = p.at("prompt_version").get<std::string>();
  r.provenance.raw = p.at("raw").get<std::string>();
  r.provenance.reflected = p.at("reflected").get<std::string>();
  r.provenance.review_status = review_status_from_string(p.at("review_status").get<std::string>());
  return r;
}

void write_jsonl(const std::string& path, const std::vector<BuiltRecord>& records, const world::WorldConfig& cfg,
                 const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : records) out << record_to_json(r, cfg, vocab).dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<BuiltRecord> read_jsonl(const std::string& path, const world::WorldConfig& cfg, const Vocab& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<BuiltRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line), cfg, vocab));
    } catch (const json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_samples(const std::string& path, const std::vector<Sample>& samples, const world::WorldConfig& cfg) {
  const Vocab vocab = cfg.make_vocab();
  std::vector<BuiltRecord> recs;
  recs.reserve(samples.size());
  for (const auto& s : samples) recs.push_back(record_from_sample(s, vocab));
  write_jsonl(path, recs, cfg, vocab);
}

std::vector<Sample> read_samples(const std::string& path, const world::WorldConfig& cfg) {
  const Vocab vocab = cfg.make_vocab();
  std::vector<Sample> out;
  for (auto& r : read_jsonl(path, cfg, vocab)) {
    const auto st = r.provenance.review_status;
    if (st == ReviewStatus::Accepted || st == ReviewStatus::Corrected) out.push_back(std::move(r.sample));
  }
  return out;
}

}  // namespace unveil
