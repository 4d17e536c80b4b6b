#include "memlab/vocab.hpp"

#include <cctype>
#include <sstream>

#include "memlab/errors.hpp"

namespace memlab {

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab([] {
    std::vector<std::string> t = {
        "<sep>", "<eos>",
        // question words and their synonyms
        "what", "which", "color", "colour", "shape", "form", "is", "the", "object", "item", "at",
        "cell", "slot", "?", "of", "username", "user_id",
        // task answers
        "red", "green", "blue", "yellow", "square", "circle", "triangle", "cross"};
    for (char c = 'A'; c <= 'Z'; ++c) t.emplace_back(1, c);
    t.emplace_back("_");
    t.emplace_back("-");
    for (char c = '0'; c <= '9'; ++c) t.emplace_back(1, c);
    return t;
  }());
  return vocab;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.find(std::string(token)) != index_.end();
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw ContractError("token '" + std::string(token) + "' not in vocabulary");
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode_words(std::string_view text) const {
  std::vector<int> ids;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode_words(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::vector<int> Vocabulary::encode_username(std::string_view name) const {
  std::vector<int> ids;
  ids.reserve(name.size());
  for (char c : name) {
    if (c == ' ') {
      ids.push_back(id("_"));
    } else {
      ids.push_back(id(std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(c))))));
    }
  }
  return ids;
}

std::string Vocabulary::decode_username(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    const std::string& t = token(i);
    out += t == "_" ? std::string(" ") : t;
  }
  return out;
}

std::vector<int> Vocabulary::encode_digits(std::string_view digits) const {
  std::vector<int> ids;
  for (char c : digits) {
    if (!std::isdigit(static_cast<unsigned char>(c))) {
      throw ContractError("non-digit character in digit string");
    }
    ids.push_back(id(std::string(1, c)));
  }
  return ids;
}

}  // namespace memlab
