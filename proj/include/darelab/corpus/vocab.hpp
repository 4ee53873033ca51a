#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace darelab {

enum class Role { filler, color, shape, position, motion, null };

std::string_view role_name(Role role);
Role parse_role(std::string_view name);
inline bool is_content(Role r) { return r == Role::color || r == Role::shape || r == Role::position || r == Role::motion; }

struct VocabConfig {
  std::vector<std::string> fillers{"the", "a", "of", "and", "in", "to", "is", "on", "that", "with"};
  std::vector<std::string> colors{"red", "green", "blue", "yellow"};
  std::vector<std::string> shapes{"circle", "square", "cross", "bar"};
  std::vector<std::string> positions{"topleft", "topright", "bottomleft", "bottomright"};
  std::vector<std::string> motions{"static", "driftright", "driftleft"};
  std::string null_token = "<null>";
};

// Token table. Ids are dense and follow listing order: fillers, colors,
// shapes, positions, motions, then the null placeholder.
class Vocab {
 public:
  Vocab() = default;
  // Validates and indexes an explicit listing (as stored in file headers).
  Vocab(std::vector<std::string> tokens, std::vector<Role> roles);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<Role>& roles() const { return roles_; }
  const std::string& str(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  Role role(int id) const { return roles_.at(static_cast<std::size_t>(id)); }
  int null_id() const { return null_id_; }
  std::optional<int> find(std::string_view token) const;
  // Ids of a role in id order.
  const std::vector<int>& members(Role role) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_ && a.roles_ == b.roles_; }

 private:
  std::vector<std::string> tokens_;
  std::vector<Role> roles_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::vector<int>> members_;
  int null_id_ = -1;
};

Vocab build_vocab(const VocabConfig& config = {});

}  // namespace darelab
