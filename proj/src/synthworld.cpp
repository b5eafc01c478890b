#include "unveil/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace unveil::world {

using nlohmann::json;

WorldConfig WorldConfig::defaults() {
  WorldConfig cfg;
  cfg.categories = {
      {"nodule", "thorax", {}},
      {"mass", "thorax", {}},
      {"cyst", "abdomen", {}},
      {"stone", "abdomen", {}},
  };
  cfg.datasets = {
      {"ct", 1.0, 0.5},
      {"xray", 1.2, -0.5},
      {"endoscopy", 0.8, 0.0},
  };
  cfg.query_templates = {
      {"what", "abnormality", "is", "shown", "in", "this", "image"},
      {"locate", "and", "diagnose", "the", "finding"},
      {"describe", "the", "abnormality", "in", "this", "image"},
  };
  return cfg;
}

void WorldConfig::validate() const {
  if (height_patches <= 0 || width_patches <= 0) throw std::invalid_argument("world: grid must be positive");
  if (category_count() < 2) throw std::invalid_argument("world: need at least 2 categories");
  if (datasets.empty()) throw std::invalid_argument("world: need at least one dataset family");
  if (feature_dim < 2) throw std::invalid_argument("world: feature_dim must be >= 2");
  if (min_box < 1 || max_box < min_box) throw std::invalid_argument("world: invalid box size range");
  if (min_box > width_patches || min_box > height_patches) {
    throw std::invalid_argument("world: abnormal region cannot fit the grid");
  }
  if (noise_scale < 0) throw std::invalid_argument("world: noise_scale must be >= 0");
  if (hint_fraction < 0 || hint_fraction > 1) throw std::invalid_argument("world: hint_fraction must be in [0,1]");
  if (query_templates.empty()) throw std::invalid_argument("world: need at least one query template");
  for (const auto& c : categories) {
    if (c.name.empty() || c.family.empty()) throw std::invalid_argument("world: category needs a name and a family");
    for (const auto& d : c.datasets) (void)dataset_index(d);
  }
  for (int d = 0; d < static_cast<int>(datasets.size()); ++d) {
    bool any = false;
    for (const auto& c : categories) {
      any = any || c.datasets.empty() ||
            std::find(c.datasets.begin(), c.datasets.end(), datasets[static_cast<size_t>(d)].name) != c.datasets.end();
    }
    if (!any) throw std::invalid_argument("world: dataset family '" + datasets[static_cast<size_t>(d)].name + "' has no categories");
  }
  const Matrix sig = signatures();
  for (int a = 0; a < sig.rows(); ++a) {
    for (int b = a + 1; b < sig.rows(); ++b) {
      if ((sig.row(a) - sig.row(b)).norm() < 1e-9) throw std::invalid_argument("world: feature signatures must be distinct");
    }
  }
}

int WorldConfig::dataset_index(const std::string& name) const {
  for (size_t i = 0; i < datasets.size(); ++i) {
    if (datasets[i].name == name) return static_cast<int>(i);
  }
  throw std::invalid_argument("world: unknown dataset family '" + name + "'");
}

bool WorldConfig::has_category_family(const std::string& family) const {
  return std::any_of(categories.begin(), categories.end(), [&](const auto& c) { return c.family == family; });
}

Matrix WorldConfig::signatures() const {
  const int c_count = category_count();
  Matrix sig = Matrix::Zero(c_count, feature_dim);
  // Channel 0 is the abnormality marker, the last channel carries dataset texture,
  // the channels in between hold one-hot category signatures when they fit.
  const bool one_hot = c_count + 2 <= feature_dim;
  std::mt19937_64 rng(0x5157ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int c = 0; c < c_count; ++c) {
    sig(c, 0) = marker_strength;
    if (one_hot) {
      sig(c, 1 + c) = signature_strength;
    } else {
      Vector dir(feature_dim - 2);
      for (int k = 0; k < dir.size(); ++k) dir(k) = normal(rng);
      dir *= signature_strength / std::max(dir.norm(), 1e-12);
      sig.row(c).segment(1, feature_dim - 2) = dir.transpose();
    }
  }
  return sig;
}

Vocab WorldConfig::make_vocab() const {
  std::vector<std::string> names;
  for (const auto& c : categories) names.push_back(c.name);
  std::vector<std::string> words;
  auto reserved = [&](const std::string& w) {
    return w == "abnormality" || w == "bbox" || w == "category" || w == "hint" ||
           std::find(names.begin(), names.end(), w) != names.end();
  };
  for (const auto& t : query_templates) {
    for (const auto& w : t) {
      if (!reserved(w) && std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
    }
  }
  return Vocab(names, std::max(width_patches, height_patches), words);
}

json WorldConfig::to_json() const {
  json cats = json::array();
  for (const auto& c : categories) cats.push_back({{"name", c.name}, {"family", c.family}, {"datasets", c.datasets}});
  json ds = json::array();
  for (const auto& d : datasets) {
    ds.push_back({{"name", d.name}, {"noise_multiplier", d.noise_multiplier}, {"background_offset", d.background_offset}});
  }
  return {{"height_patches", height_patches},
          {"width_patches", width_patches},
          {"feature_dim", feature_dim},
          {"categories", cats},
          {"datasets", ds},
          {"marker_strength", marker_strength},
          {"signature_strength", signature_strength},
          {"noise_scale", noise_scale},
          {"min_box", min_box},
          {"max_box", max_box},
          {"decoy", decoy},
          {"hint_fraction", hint_fraction},
          {"hinted_marker_scale", hinted_marker_scale},
          {"query_templates", query_templates},
          {"seed", seed}};
}

WorldConfig WorldConfig::from_json(const json& j) {
  WorldConfig cfg = defaults();
  cfg.height_patches = j.value("height_patches", cfg.height_patches);
  cfg.width_patches = j.value("width_patches", cfg.width_patches);
  cfg.feature_dim = j.value("feature_dim", cfg.feature_dim);
  if (j.contains("categories")) {
    cfg.categories.clear();
    for (const auto& c : j.at("categories")) {
      cfg.categories.push_back({c.at("name").get<std::string>(), c.at("family").get<std::string>(),
                                c.value("datasets", std::vector<std::string>{})});
    }
  }
  if (j.contains("datasets")) {
    cfg.datasets.clear();
    for (const auto& d : j.at("datasets")) {
      cfg.datasets.push_back({d.at("name").get<std::string>(), d.value("noise_multiplier", 1.0),
                              d.value("background_offset", 0.0)});
    }
  }
  cfg.marker_strength = j.value("marker_strength", cfg.marker_strength);
  cfg.signature_strength = j.value("signature_strength", cfg.signature_strength);
  cfg.noise_scale = j.value("noise_scale", cfg.noise_scale);
  cfg.min_box = j.value("min_box", cfg.min_box);
  cfg.max_box = j.value("max_box", cfg.max_box);
  cfg.decoy = j.value("decoy", cfg.decoy);
  cfg.hint_fraction = j.value("hint_fraction", cfg.hint_fraction);
  cfg.hinted_marker_scale = j.value("hinted_marker_scale", cfg.hinted_marker_scale);
  if (j.contains("query_templates")) cfg.query_templates = j.at("query_templates").get<std::vector<std::vector<std::string>>>();
  cfg.seed = j.value("seed", cfg.seed);
  return cfg;
}

void SplitPlan::validate(const WorldConfig& cfg) const {
  if (!(train_fraction > 0 && train_fraction < 1)) throw std::invalid_argument("split: train_fraction must be in (0,1)");
  if (!(dev_fraction >= 0 && dev_fraction < 1)) throw std::invalid_argument("split: dev_fraction must be in [0,1)");
  for (const auto& e : heldout_category_families) {
    const auto at = e.find('@');
    const std::string fam = e.substr(0, at);
    if (!cfg.has_category_family(fam)) throw std::invalid_argument("split: unknown category family '" + fam + "'");
    if (at != std::string::npos) (void)cfg.dataset_index(e.substr(at + 1));
  }
  for (const auto& d : heldout_dataset_families) (void)cfg.dataset_index(d);
}

json SplitPlan::to_json() const {
  return {{"heldout_category_families", heldout_category_families},
          {"heldout_dataset_families", heldout_dataset_families},
          {"train_fraction", train_fraction},
          {"dev_fraction", dev_fraction},
          {"seed", seed}};
}

SplitPlan SplitPlan::from_json(const json& j) {
  SplitPlan p;
  p.heldout_category_families = j.value("heldout_category_families", p.heldout_category_families);
  p.heldout_dataset_families = j.value("heldout_dataset_families", p.heldout_dataset_families);
  p.train_fraction = j.value("train_fraction", p.train_fraction);
  p.dev_fraction = j.value("dev_fraction", p.dev_fraction);
  p.seed = j.value("seed", p.seed);
  return p;
}

std::uint64_t sample_seed(std::uint64_t world_seed, std::uint64_t index) {
  // splitmix64 over the pair
  std::uint64_t z = world_seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

std::vector<int> categories_in_dataset(const WorldConfig& cfg, int d) {
  std::vector<int> out;
  const auto& name = cfg.datasets[static_cast<size_t>(d)].name;
  for (int c = 0; c < cfg.category_count(); ++c) {
    const auto& ds = cfg.categories[static_cast<size_t>(c)].datasets;
    if (ds.empty() || std::find(ds.begin(), ds.end(), name) != ds.end()) out.push_back(c);
  }
  return out;
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

BBox random_box(const WorldConfig& cfg, std::mt19937_64& rng) {
  const int w = uniform_int(rng, cfg.min_box, std::min(cfg.max_box, cfg.width_patches));
  const int h = uniform_int(rng, cfg.min_box, std::min(cfg.max_box, cfg.height_patches));
  const int x = uniform_int(rng, 0, cfg.width_patches - w);
  const int y = uniform_int(rng, 0, cfg.height_patches - h);
  return BBox(x, y, x + w, y + h);
}

double overlap_area(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  return ix * iy;
}

}  // namespace

Sample generate_sample(const WorldConfig& cfg, const Vocab& vocab, std::uint64_t seed, const std::string& id) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int d = uniform_int(rng, 0, static_cast<int>(cfg.datasets.size()) - 1);
  const auto eligible = categories_in_dataset(cfg, d);
  const int c = eligible[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(eligible.size()) - 1))];
  const BBox region = random_box(cfg, rng);

  std::optional<BBox> decoy;
  int decoy_category = -1;
  if (cfg.decoy) {
    for (int attempt = 0; attempt < 64 && !decoy; ++attempt) {
      BBox cand = random_box(cfg, rng);
      if (overlap_area(cand, region) == 0.0) decoy = cand;
    }
    decoy_category = (c + uniform_int(rng, 1, cfg.category_count() - 1)) % cfg.category_count();
  }
  const bool hinted = unit(rng) < cfg.hint_fraction;
  const auto& tmpl = cfg.query_templates[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(cfg.query_templates.size()) - 1))];

  const auto& ds = cfg.datasets[static_cast<size_t>(d)];
  const Matrix sig = cfg.signatures();
  const int P = cfg.height_patches * cfg.width_patches;
  const int F = cfg.feature_dim;
  const double sigma = cfg.noise_scale * ds.noise_multiplier;

  Matrix feats(P, F);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int p = 0; p < P; ++p) {
    for (int k = 0; k < F; ++k) feats(p, k) = sigma > 0 ? sigma * normal(rng) : 0.0;
  }
  std::vector<char> abnormal(static_cast<size_t>(P), 0);
  for (int p : patches_in_region(region, cfg.height_patches, cfg.width_patches)) abnormal[static_cast<size_t>(p)] = 1;
  Vector signature = sig.row(c).transpose();
  if (hinted) signature(0) *= cfg.hinted_marker_scale;
  if (decoy) {
    Vector decoy_sig = sig.row(decoy_category).transpose();
    decoy_sig(0) = 0.0;
    for (int p : patches_in_region(*decoy, cfg.height_patches, cfg.width_patches)) feats.row(p) += decoy_sig.transpose();
  }
  for (int p = 0; p < P; ++p) {
    if (abnormal[static_cast<size_t>(p)]) {
      feats.row(p) += signature.transpose();
    } else {
      feats(p, F - 1) += ds.background_offset;
    }
  }

  Sample s;
  s.id = id;
  s.image.height_patches = cfg.height_patches;
  s.image.width_patches = cfg.width_patches;
  s.image.patch_features = std::move(feats);
  s.image.abnormal_region = region;
  s.image.category_id = c;
  s.gt_category = c;
  s.gt_bbox = region;
  s.generator_seed = seed;
  s.dataset_family = d;
  for (const auto& w : tmpl) s.query.push_back(vocab.lookup(w).value_or(Vocab::kUnk));
  if (hinted) {
    s.hint = region;
    const auto h = encode_hint(vocab, region);
    s.query.insert(s.query.end(), h.begin(), h.end());
  }
  s.reference_response = encode_response(vocab, c, region);
  return s;
}

std::vector<Sample> generate_dataset(const WorldConfig& cfg, int n) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  cfg.validate();
  const Vocab vocab = cfg.make_vocab();
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.push_back(generate_sample(cfg, vocab, sample_seed(cfg.seed, static_cast<std::uint64_t>(i)),
                                  "w" + std::to_string(cfg.seed) + "-" + std::to_string(i)));
  }
  return out;
}

std::string category_family_of(const WorldConfig& cfg, const Sample& s) {
  return cfg.categories.at(static_cast<size_t>(s.gt_category)).family;
}

std::string dataset_family_of(const WorldConfig& cfg, const Sample& s) {
  return cfg.datasets.at(static_cast<size_t>(s.dataset_family)).name;
}

std::vector<Sample> apply_split(std::vector<Sample> samples, const SplitPlan& plan, const WorldConfig& cfg) {
  plan.validate(cfg);
  std::vector<size_t> pool;
  for (size_t i = 0; i < samples.size(); ++i) {
    auto& s = samples[i];
    s.split_tags.clear();
    const auto fam = category_family_of(cfg, s);
    const auto ds = dataset_family_of(cfg, s);
    bool held_cat = false;
    for (const auto& e : plan.heldout_category_families) held_cat = held_cat || e == fam || e == fam + "@" + ds;
    const bool held_ds = std::find(plan.heldout_dataset_families.begin(), plan.heldout_dataset_families.end(), ds) !=
                         plan.heldout_dataset_families.end();
    if (held_cat) s.split_tags.insert(kHeldoutCategory);
    if (held_ds) s.split_tags.insert(kHeldoutDataset);
    if (held_cat || held_ds) {
      s.split_tags.insert(kTest);
    } else {
      pool.push_back(i);
    }
  }
  std::mt19937_64 rng(plan.seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  const auto n_train = static_cast<size_t>(std::llround(plan.train_fraction * static_cast<double>(pool.size())));
  const size_t n_test = pool.size() - n_train;
  const auto n_dev = static_cast<size_t>(std::llround(plan.dev_fraction * static_cast<double>(n_test)));
  for (size_t k = 0; k < pool.size(); ++k) {
    auto& tags = samples[pool[k]].split_tags;
    if (k < n_train) {
      tags.insert(kTrain);
    } else {
      tags.insert(kTest);
      if (k - n_train < n_dev) tags.insert(kDev);
    }
  }
  const bool any_train = n_train > 0;
  const bool any_test = std::any_of(samples.begin(), samples.end(), [](const Sample& s) { return s.has_tag(kTest); });
  if (!any_train) throw std::invalid_argument("split: empty train split after exclusion");
  if (!any_test) throw std::invalid_argument("split: empty test split after exclusion");
  return samples;
}

namespace {

struct ShiftRange {
  double direction;
  double room;
};

ShiftRange best_direction(const BBox& gt, int width) {
  const double right = width - gt.x2;
  const double left = gt.x1;
  return right >= left ? ShiftRange{1.0, right} : ShiftRange{-1.0, left};
}

}  // namespace

BBox make_iou_hint(const BBox& gt, double target_iou, int width, int height) {
  if (!(target_iou >= 0.0 && target_iou <= 1.0)) throw std::invalid_argument("make_iou_hint: target must be in [0,1]");
  if (gt.area() <= 0) throw std::invalid_argument("make_iou_hint: gt must have positive area");
  if (gt.x1 < 0 || gt.y1 < 0 || gt.x2 > width || gt.y2 > height) throw std::invalid_argument("make_iou_hint: gt outside grid");
  constexpr double kTol = 0.01;
  if (target_iou >= 1.0 - 1e-12) return gt;
  const auto [dir, room] = best_direction(gt, width);
  auto at = [&](double s) { return gt.translated(dir * s, 0.0); };
  // iou decreases monotonically with the shift
  if (iou(at(room), gt) > target_iou + kTol) {
    throw std::domain_error("make_iou_hint: target iou unreachable inside the grid");
  }
  double lo = 0.0, hi = room;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (iou(at(mid), gt) > target_iou) lo = mid; else hi = mid;
  }
  const BBox out = at(hi);
  if (std::abs(iou(out, gt) - target_iou) > kTol) throw std::domain_error("make_iou_hint: bisection did not reach target");
  return out;
}

BBox make_quantized_iou_hint(const BBox& gt, double target_iou, int width, int height) {
  (void)make_iou_hint(gt, target_iou, width, height);
  const auto [dir, room] = best_direction(gt, width);
  BBox best = gt;
  double best_err = std::abs(1.0 - target_iou);
  for (int s = 1; s <= static_cast<int>(std::floor(room)); ++s) {
    const BBox cand = gt.translated(dir * s, 0.0);
    const double err = std::abs(iou(cand, gt) - target_iou);
    if (err < best_err - 1e-12) {
      best = cand;
      best_err = err;
    }
  }
  return best;
}

}  // namespace unveil::world
