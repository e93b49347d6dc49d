#pragma once

// Flat (softmax) and hierarchical (binary-tree, per-level sigmoid) semantics:
// label encoding, prediction decoding and the two semantic losses.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scenelabel/common.hpp"

namespace scenelabel {

enum class SemanticMode { kFlat, kHierarchical };

std::string_view SemanticModeName(SemanticMode mode);
SemanticMode ParseSemanticMode(std::string_view name);

/// Floor applied to probabilities inside logarithms.
inline constexpr double kProbFloor = 1e-12;
inline constexpr int kDefaultMaxClasses = 16;
inline constexpr int kDefaultTreeDepth = 8;

/// Fixed 16-entry class palette.
Rgb8 PaletteColour(int index);

// ---------------------------------------------------------------- flat mode

struct FlatLabel {
  int class_id = 0;
  bool operator==(const FlatLabel&) const = default;
};

/// Max-subtracted softmax.
template <typename Scalar>
VectorX<Scalar> FlatProbs(const Eigen::Ref<const VectorX<Scalar>>& logits);

/// -log(max(p[label], floor)); throws kOutOfRange for a bad class id.
double FlatLoss(const Eigen::Ref<const VectorX<double>>& probs,
                const FlatLabel& label);

/// Cross-entropy on logits; *grad = softmax - onehot when non-null.
template <typename Scalar>
Scalar FlatLossFromLogits(const Eigen::Ref<const VectorX<Scalar>>& logits,
                          int class_id, VectorX<Scalar>* grad);

/// Classes created on the fly; ids are dense in creation order.
class ClassRegistry {
 public:
  explicit ClassRegistry(int max_classes = kDefaultMaxClasses)
      : max_classes_(max_classes) {}

  int size() const { return static_cast<int>(names_.size()); }
  int max_classes() const { return max_classes_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(int id) const;
  Rgb8 colour(int id) const;
  std::optional<int> find(std::string_view name) const;
  /// Returns the id of `name`, creating it if needed (kLimit when full).
  int add(const std::string& name);
  void set_colour(int id, Rgb8 colour);
  void rename(int id, const std::string& name);

  bool operator==(const ClassRegistry&) const = default;

 private:
  int max_classes_;
  std::vector<std::string> names_;
  std::map<int, Rgb8> colour_overrides_;
};

// -------------------------------------------------------- hierarchical mode

/// Branch bits from the root; empty = root.
using BranchPath = std::vector<uint8_t>;

std::string PathToString(const BranchPath& path);
BranchPath PathFromString(std::string_view text);

struct HierLabel {
  BranchPath bits;  // length L >= 1
  bool operator==(const HierLabel&) const = default;
};

struct LabelNode {
  BranchPath path;
  std::string name;
  Rgb8 colour;
};

struct HierEncoding {
  HierLabel label;
  std::vector<uint8_t> bits;  // length n, zero beyond L
  std::vector<uint8_t> mask;  // length n, 1 for levels 1..L
};

/// User-defined binary hierarchy. Value type: edits produce a new tree.
class LabelTree {
 public:
  explicit LabelTree(int depth = kDefaultTreeDepth);

  int depth() const { return depth_; }
  size_t size() const { return nodes_.size(); }
  bool contains(const BranchPath& path) const;
  const LabelNode* find(const BranchPath& path) const;
  const LabelNode* find_by_name(std::string_view name) const;
  std::vector<LabelNode> nodes() const;

  /// Adds a node; its parent must exist (the root always does).
  void add_node(const BranchPath& path, const std::string& name,
                std::optional<Rgb8> colour = std::nullopt);
  /// Removes a leaf node (kInvalidArgument if it still has children).
  void remove_node(const BranchPath& path);
  void validate() const;

  HierEncoding encode(const BranchPath& node) const;
  /// Walks from the root following 1[sigma_j > 0.5]; returns the deepest
  /// existing node (root = empty path). `max_level` truncates the walk.
  BranchPath decode(std::span<const double> sigma,
                    int max_level = -1) const;
  /// Node colour; the root renders grey.
  Rgb8 colour(const BranchPath& path) const;

  bool operator==(const LabelTree& o) const;

 private:
  int depth_;
  std::map<BranchPath, LabelNode> nodes_;
};

/// Default colour for a node: level 1 takes palette[bit]; deeper levels blend
/// the parent colour with a level-dependent palette entry.
Rgb8 DefaultNodeColour(const BranchPath& path);

/// Masked binary cross-entropy over levels 1..L on activations sigma.
double HierLoss(std::span<const double> sigma, const HierLabel& label);

/// Same loss evaluated stably on logits; *grad = (sigmoid - bit) on active
/// levels, 0 elsewhere.
template <typename Scalar>
Scalar HierLossFromLogits(const Eigen::Ref<const VectorX<Scalar>>& logits,
                          const HierLabel& label, VectorX<Scalar>* grad);

double BinaryEntropy(double p);

// ------------------------------------------------------------ label schema

struct LabelSchema {
  SemanticMode mode = SemanticMode::kFlat;
  ClassRegistry classes;
  LabelTree tree;
};

nlohmann::json SchemaToJson(const LabelSchema& schema);
LabelSchema SchemaFromJson(const nlohmann::json& j);

}  // namespace scenelabel
