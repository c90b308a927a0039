#include "coal/newick.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>

#include "coal/error.hpp"

namespace coal {

namespace {

bool needs_quoting(const std::string& name) {
  if (name.empty()) return false;
  return name.find_first_of(" \t\r\n()[]':;,") != std::string::npos;
}

std::string quote_name(const std::string& name) {
  if (!needs_quoting(name)) return name;
  std::string out = "'";
  for (char c : name) {
    if (c == '\'') out += "''";
    else out += c;
  }
  out += '\'';
  return out;
}

void write_subtree(const CoalescentTree& tree, int id, std::string& out) {
  const auto& n = tree.node(id);
  if (!n.is_leaf()) {
    out += '(';
    for (std::size_t i = 0; i < n.children.size(); ++i) {
      if (i) out += ',';
      write_subtree(tree, n.children[i], out);
    }
    out += ')';
  }
  out += quote_name(n.name);
  if (n.parent) {
    out += ':';
    out += format_double(tree.branch_length(id));
  }
}

struct RawNode {
  std::string name;
  std::optional<double> length;
  std::vector<int> children;
  int parent = -1;
};

class Parser {
 public:
  explicit Parser(std::string_view text) : s_(text) {}

  std::vector<RawNode> parse(int& root) {
    root = subtree(-1);
    skip_ws();
    expect(';');
    skip_ws();
    if (pos_ != s_.size()) fail("trailing characters after ';'");
    return std::move(nodes_);
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw Error(ErrorKind::parse_error, "newick: " + msg + " at offset " + std::to_string(pos_));
  }

  void skip_ws() {
    while (pos_ < s_.size()) {
      char c = s_[pos_];
      if (c == '[') {
        auto end = s_.find(']', pos_);
        if (end == std::string_view::npos) fail("unterminated comment");
        pos_ = end + 1;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  void expect(char c) {
    if (pos_ >= s_.size() || s_[pos_] != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  std::string label() {
    skip_ws();
    std::string out;
    if (pos_ < s_.size() && s_[pos_] == '\'') {
      ++pos_;
      while (true) {
        if (pos_ >= s_.size()) fail("unterminated quoted label");
        char c = s_[pos_++];
        if (c == '\'') {
          if (pos_ < s_.size() && s_[pos_] == '\'') {
            out += '\'';
            ++pos_;
          } else {
            break;
          }
        } else {
          out += c;
        }
      }
      return out;
    }
    while (pos_ < s_.size()) {
      char c = s_[pos_];
      if (std::string_view(" \t\r\n()[]':;,").find(c) != std::string_view::npos) break;
      out += c;
      ++pos_;
    }
    return out;
  }

  int subtree(int parent) {
    skip_ws();
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(RawNode{});
    nodes_[static_cast<std::size_t>(id)].parent = parent;
    if (pos_ < s_.size() && s_[pos_] == '(') {
      ++pos_;
      while (true) {
        int c = subtree(id);
        nodes_[static_cast<std::size_t>(id)].children.push_back(c);
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ',') {
          ++pos_;
          continue;
        }
        expect(')');
        break;
      }
    }
    nodes_[static_cast<std::size_t>(id)].name = label();
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == ':') {
      ++pos_;
      skip_ws();
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(s_.data() + pos_, s_.data() + s_.size(), v);
      if (ec != std::errc()) fail("bad branch length");
      pos_ = static_cast<std::size_t>(ptr - s_.data());
      nodes_[static_cast<std::size_t>(id)].length = v;
    }
    return id;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  std::vector<RawNode> nodes_;
};

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string export_newick(const CoalescentTree& tree) {
  std::string out;
  write_subtree(tree, tree.root(), out);
  out += ';';
  return out;
}

CoalescentTree parse_newick(std::string_view text, const std::optional<std::vector<std::string>>& task_names) {
  int raw_root = 0;
  std::vector<RawNode> raw = Parser(text).parse(raw_root);

  // Depth below the root, in preorder (parents precede children in raw).
  std::vector<double> depth(raw.size(), 0.0);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].parent < 0) continue;
    if (!raw[i].length) throw Error(ErrorKind::parse_error, "newick: missing branch length");
    require(*raw[i].length > 0.0, ErrorKind::parse_error, "newick: branch lengths must be positive");
    depth[i] = depth[static_cast<std::size_t>(raw[i].parent)] + *raw[i].length;
  }
  std::vector<int> raw_leaves;
  for (std::size_t i = 0; i < raw.size(); ++i)
    if (raw[i].children.empty()) raw_leaves.push_back(static_cast<int>(i));
  double height = 0.0;
  for (int l : raw_leaves) height = std::max(height, depth[static_cast<std::size_t>(l)]);
  for (int l : raw_leaves)
    require(std::abs(depth[static_cast<std::size_t>(l)] - height) <= 1e-9 * std::max(1.0, height),
            ErrorKind::parse_error, "newick: tree is not ultrametric");

  // Leaf order: by task name when given, else by appearance.
  std::vector<int> leaf_order = raw_leaves;
  if (task_names) {
    require(task_names->size() == raw_leaves.size(), ErrorKind::parse_error,
            "newick: leaf count differs from task count");
    std::map<std::string, int> by_name;
    for (int l : raw_leaves) {
      auto [it, inserted] = by_name.emplace(raw[static_cast<std::size_t>(l)].name, l);
      require(inserted, ErrorKind::parse_error, "newick: duplicate leaf name");
    }
    leaf_order.clear();
    for (const auto& name : *task_names) {
      auto it = by_name.find(name);
      require(it != by_name.end(), ErrorKind::parse_error, "newick: no leaf named '" + name + "'");
      leaf_order.push_back(it->second);
    }
  }

  // Renumber: leaves 0..K-1 in task order, then internal nodes in raw order.
  std::vector<int> new_id(raw.size(), -1);
  int next = 0;
  for (int l : leaf_order) new_id[static_cast<std::size_t>(l)] = next++;
  for (std::size_t i = 0; i < raw.size(); ++i)
    if (!raw[i].children.empty()) new_id[i] = next++;

  std::vector<TreeNode> nodes(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto& n = nodes[static_cast<std::size_t>(new_id[i])];
    n.id = new_id[i];
    n.name = raw[i].name;
    if (raw[i].parent >= 0) n.parent = new_id[static_cast<std::size_t>(raw[i].parent)];
    for (int c : raw[i].children) n.children.push_back(new_id[static_cast<std::size_t>(c)]);
    n.time = raw[i].children.empty() ? 0.0 : depth[i] - height;
  }
  std::vector<int> leaves(leaf_order.size());
  for (std::size_t k = 0; k < leaves.size(); ++k) leaves[k] = static_cast<int>(k);
  return CoalescentTree(std::move(nodes), new_id[static_cast<std::size_t>(raw_root)], std::move(leaves));
}

}  // namespace coal
