#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace memlab {

// Closed token table shared by the corpus and the model. Words are lowercase,
// username characters are single uppercase letters plus "_" (space) and "-",
// digits double as grid coordinates and user_id characters.
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> tokens);

  // The fixed table used throughout the lab.
  static const Vocabulary& standard();

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const;
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  int sep() const { return id("<sep>"); }
  int eos() const { return id("<eos>"); }

  // Space-separated words <-> ids.
  std::vector<int> encode_words(std::string_view text) const;
  std::string decode_words(std::span<const int> ids) const;

  // Username text <-> per-character tokens (case-insensitive; space maps to "_").
  std::vector<int> encode_username(std::string_view name) const;
  std::string decode_username(std::span<const int> ids) const;

  std::vector<int> encode_digits(std::string_view digits) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace memlab
