#pragma once

#include "unveil/core.hpp"

#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace unveil {

/// Token inventory: specials, schema keywords, category names, coordinates 0..max_coord,
/// then free query words. Ids form one contiguous range [0, size()).
class Vocab {
 public:
  static constexpr Token kPad = 0;
  static constexpr Token kBos = 1;
  static constexpr Token kEos = 2;
  static constexpr Token kSep = 3;
  static constexpr Token kUnk = 4;

  Vocab() = default;
  Vocab(std::vector<std::string> category_names, int max_coord, std::vector<std::string> query_words);

  int size() const { return static_cast<int>(words_.size()); }
  int category_count() const { return static_cast<int>(category_names_.size()); }
  int max_coord() const { return max_coord_; }

  Token abnormality() const { return kw_abnormality_; }
  Token bbox() const { return kw_bbox_; }
  Token category() const { return kw_category_; }
  Token hint() const { return kw_hint_; }

  Token category_token(int c) const;
  Token coord_token(int v) const;

  bool is_category(Token t) const { return t >= cat_begin_ && t < cat_begin_ + category_count(); }
  bool is_coord(Token t) const { return t >= coord_begin_ && t <= coord_begin_ + max_coord_; }
  int category_of(Token t) const { return t - cat_begin_; }
  int coord_of(Token t) const { return t - coord_begin_; }
  bool valid(Token t) const { return t >= 0 && t < size(); }

  const std::string& text(Token t) const;
  std::optional<Token> lookup(const std::string& word) const;
  const std::string& category_name(int c) const { return category_names_.at(static_cast<size_t>(c)); }
  const std::vector<std::string>& category_names() const { return category_names_; }
  const std::vector<std::string>& query_words() const { return query_words_; }

  /// Space-separated tokens; unknown words map to <unk>. Matching is case-insensitive.
  TokenSeq encode(const std::string& text) const;
  std::string decode(const TokenSeq& ids) const;

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.words_ == b.words_; }

 private:
  std::vector<std::string> category_names_;
  std::vector<std::string> query_words_;
  int max_coord_ = 0;
  std::vector<std::string> words_;
  std::map<std::string, Token> index_;
  Token kw_abnormality_ = 0, kw_bbox_ = 0, kw_category_ = 0, kw_hint_ = 0;
  Token cat_begin_ = 0, coord_begin_ = 0;
};

/// Canonical response: detection phrase, bbox, category, EOS.
/// Coordinates are rounded to integer patch units and clamped to the coordinate range.
TokenSeq encode_response(const Vocab& vocab, int category, const BBox& bbox);

/// Tolerant, total parser. Scans up to the first EOS for `bbox c c c c` and
/// `category <name>` in either order; schema_valid iff both were found.
Response parse_response(const Vocab& vocab, const TokenSeq& tokens);

/// `hint bbox x1 y1 x2 y2`, appended to a query for localization hints.
TokenSeq encode_hint(const Vocab& vocab, const BBox& bbox);

}  // namespace unveil
