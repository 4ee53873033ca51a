#include "darelab/corpus/vocab.hpp"

#include <array>

#include "darelab/error.hpp"

namespace darelab {

namespace {

constexpr std::array<std::pair<Role, std::string_view>, 6> kRoleNames{{
    {Role::filler, "filler"},
    {Role::color, "color"},
    {Role::shape, "shape"},
    {Role::position, "position"},
    {Role::motion, "motion"},
    {Role::null, "null"},
}};

}  // namespace

std::string_view role_name(Role role) {
  for (const auto& [r, name] : kRoleNames) {
    if (r == role) return name;
  }
  return "unknown";
}

Role parse_role(std::string_view name) {
  for (const auto& [r, n] : kRoleNames) {
    if (n == name) return r;
  }
  throw ParseError("unknown token role '" + std::string(name) + "'");
}

Vocab::Vocab(std::vector<std::string> tokens, std::vector<Role> roles)
    : tokens_(std::move(tokens)), roles_(std::move(roles)), members_(kRoleNames.size()) {
  if (tokens_.size() != roles_.size()) throw ConfigError("vocab: token and role lists differ in length");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw ConfigError("vocab: empty token string at id " + std::to_string(i));
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ConfigError("vocab: duplicate token '" + tokens_[i] + "'");
    }
    members_[static_cast<std::size_t>(roles_[i])].push_back(static_cast<int>(i));
    if (roles_[i] == Role::null) {
      if (null_id_ >= 0) throw ConfigError("vocab: more than one null token");
      null_id_ = static_cast<int>(i);
    }
  }
  if (null_id_ < 0) throw ConfigError("vocab: missing null token");
  for (Role r : {Role::color, Role::shape, Role::position, Role::motion}) {
    if (members(r).size() < 3) {
      throw ConfigError("vocab: role '" + std::string(role_name(r)) + "' needs at least 3 members");
    }
  }
  if (members(Role::filler).size() < 8) throw ConfigError("vocab: filler role needs at least 8 members");
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::vector<int>& Vocab::members(Role role) const { return members_.at(static_cast<std::size_t>(role)); }

Vocab build_vocab(const VocabConfig& config) {
  std::vector<std::string> tokens;
  std::vector<Role> roles;
  auto append = [&](const std::vector<std::string>& list, Role role) {
    for (const auto& t : list) {
      tokens.push_back(t);
      roles.push_back(role);
    }
  };
  append(config.fillers, Role::filler);
  append(config.colors, Role::color);
  append(config.shapes, Role::shape);
  append(config.positions, Role::position);
  append(config.motions, Role::motion);
  tokens.push_back(config.null_token);
  roles.push_back(Role::null);
  return Vocab(std::move(tokens), std::move(roles));
}

}  // namespace darelab
