#include "unveil/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace unveil {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

Vocab::Vocab(std::vector<std::string> category_names, int max_coord, std::vector<std::string> query_words)
    : category_names_(std::move(category_names)), query_words_(std::move(query_words)), max_coord_(max_coord) {
  if (max_coord_ < 1) throw std::invalid_argument("vocab: max_coord must be >= 1");
  auto add = [&](const std::string& w) {
    const std::string key = lower(w);
    if (index_.count(key)) throw std::invalid_argument("vocab: duplicate word '" + w + "'");
    const auto id = static_cast<Token>(words_.size());
    words_.push_back(key);
    index_.emplace(key, id);
    return id;
  };
  add("<pad>");
  add("<bos>");
  add("<eos>");
  add("<sep>");
  add("<unk>");
  kw_abnormality_ = add("abnormality");
  kw_bbox_ = add("bbox");
  kw_category_ = add("category");
  kw_hint_ = add("hint");
  cat_begin_ = static_cast<Token>(words_.size());
  for (const auto& c : category_names_) add(c);
  coord_begin_ = static_cast<Token>(words_.size());
  for (int v = 0; v <= max_coord_; ++v) add(std::to_string(v));
  for (const auto& w : query_words_) add(w);
}

Token Vocab::category_token(int c) const {
  if (c < 0 || c >= category_count()) throw std::out_of_range("vocab: category id out of range");
  return cat_begin_ + c;
}

Token Vocab::coord_token(int v) const {
  if (v < 0 || v > max_coord_) throw std::out_of_range("vocab: coordinate out of range");
  return coord_begin_ + v;
}

const std::string& Vocab::text(Token t) const {
  if (!valid(t)) throw std::out_of_range("vocab: token id out of range");
  return words_[static_cast<size_t>(t)];
}

std::optional<Token> Vocab::lookup(const std::string& word) const {
  auto it = index_.find(lower(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenSeq Vocab::encode(const std::string& text) const {
  TokenSeq out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(lookup(w).value_or(kUnk));
  return out;
}

std::string Vocab::decode(const TokenSeq& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += text(ids[i]);
  }
  return out;
}

nlohmann::json Vocab::to_json() const {
  return {{"categories", category_names_}, {"max_coord", max_coord_}, {"query_words", query_words_}};
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  return Vocab(j.at("categories").get<std::vector<std::string>>(), j.at("max_coord").get<int>(),
               j.at("query_words").get<std::vector<std::string>>());
}

TokenSeq encode_response(const Vocab& vocab, int category, const BBox& bbox) {
  TokenSeq out{vocab.abnormality(), vocab.bbox()};
  for (double v : {bbox.x1, bbox.y1, bbox.x2, bbox.y2}) {
    const int q = std::clamp(static_cast<int>(std::lround(v)), 0, vocab.max_coord());
    out.push_back(vocab.coord_token(q));
  }
  out.push_back(vocab.category());
  out.push_back(vocab.category_token(category));
  out.push_back(Vocab::kEos);
  return out;
}

TokenSeq encode_hint(const Vocab& vocab, const BBox& bbox) {
  TokenSeq out{vocab.hint(), vocab.bbox()};
  for (double v : {bbox.x1, bbox.y1, bbox.x2, bbox.y2}) {
    const int q = std::clamp(static_cast<int>(std::lround(v)), 0, vocab.max_coord());
    out.push_back(vocab.coord_token(q));
  }
  return out;
}

Response parse_response(const Vocab& vocab, const TokenSeq& tokens) {
  Response r;
  r.tokens = tokens;
  auto end = std::find(tokens.begin(), tokens.end(), Vocab::kEos);
  const auto n = static_cast<size_t>(end - tokens.begin());
  for (size_t i = 0; i < n; ++i) {
    const Token t = tokens[i];
    if (!r.parsed_bbox && t == vocab.bbox() && i + 4 < n) {
      bool coords = true;
      for (size_t k = 1; k <= 4; ++k) coords = coords && vocab.is_coord(tokens[i + k]);
      if (!coords) continue;
      const double x1 = vocab.coord_of(tokens[i + 1]);
      const double y1 = vocab.coord_of(tokens[i + 2]);
      const double x2 = vocab.coord_of(tokens[i + 3]);
      const double y2 = vocab.coord_of(tokens[i + 4]);
      if (x1 <= x2 && y1 <= y2) r.parsed_bbox = BBox(x1, y1, x2, y2);
    } else if (!r.parsed_category && t == vocab.category() && i + 1 < n && vocab.is_category(tokens[i + 1])) {
      r.parsed_category = vocab.category_of(tokens[i + 1]);
    }
  }
  r.schema_valid = r.parsed_bbox.has_value() && r.parsed_category.has_value();
  return r;
}

}  // namespace unveil
