#include "scenelabel/semantics.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace scenelabel {

std::string_view SemanticModeName(SemanticMode mode) {
  return mode == SemanticMode::kFlat ? "flat" : "hierarchical";
}

SemanticMode ParseSemanticMode(std::string_view name) {
  if (name == "flat") return SemanticMode::kFlat;
  if (name == "hierarchical") return SemanticMode::kHierarchical;
  throw Error(ErrorCode::kParse, "unknown semantic mode '" + std::string(name) + "'");
}

Rgb8 PaletteColour(int index) {
  static constexpr std::array<Rgb8, 16> kPalette = {{
      {230, 25, 75},   {60, 180, 75},   {255, 225, 25},  {0, 130, 200},
      {245, 130, 48},  {145, 30, 180},  {70, 240, 240},  {240, 50, 230},
      {210, 245, 60},  {250, 190, 212}, {0, 128, 128},   {220, 190, 255},
      {170, 110, 40},  {255, 250, 200}, {128, 0, 0},     {170, 255, 195},
  }};
  const int n = static_cast<int>(kPalette.size());
  return kPalette[((index % n) + n) % n];
}

template <typename Scalar>
VectorX<Scalar> FlatProbs(const Eigen::Ref<const VectorX<Scalar>>& logits) {
  if (logits.size() < 1) {
    throw Error(ErrorCode::kInvalidArgument, "softmax needs >= 1 logit");
  }
  VectorX<Scalar> p = (logits.array() - logits.maxCoeff()).exp();
  p /= p.sum();
  return p;
}

double FlatLoss(const Eigen::Ref<const VectorX<double>>& probs,
                const FlatLabel& label) {
  if (label.class_id < 0 || label.class_id >= probs.size()) {
    throw Error(ErrorCode::kOutOfRange, "class id out of range");
  }
  return -std::log(std::max(probs[label.class_id], kProbFloor));
}

template <typename Scalar>
Scalar FlatLossFromLogits(const Eigen::Ref<const VectorX<Scalar>>& logits,
                          int class_id, VectorX<Scalar>* grad) {
  if (class_id < 0 || class_id >= logits.size()) {
    throw Error(ErrorCode::kOutOfRange, "class id out of range");
  }
  const VectorX<Scalar> p = FlatProbs<Scalar>(logits);
  if (grad != nullptr) {
    *grad = p;
    (*grad)[class_id] -= Scalar(1);
  }
  return -std::log(std::max(p[class_id], static_cast<Scalar>(kProbFloor)));
}

const std::string& ClassRegistry::name(int id) const {
  if (id < 0 || id >= size()) throw Error(ErrorCode::kOutOfRange, "unknown class id");
  return names_[id];
}

Rgb8 ClassRegistry::colour(int id) const {
  if (auto it = colour_overrides_.find(id); it != colour_overrides_.end()) {
    return it->second;
  }
  return PaletteColour(id);
}

std::optional<int> ClassRegistry::find(std::string_view name) const {
  for (int i = 0; i < size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

int ClassRegistry::add(const std::string& name) {
  if (auto id = find(name)) return *id;
  if (size() >= max_classes_) {
    throw Error(ErrorCode::kLimit, "class limit of " +
                                       std::to_string(max_classes_) +
                                       " reached");
  }
  names_.push_back(name);
  return size() - 1;
}

void ClassRegistry::set_colour(int id, Rgb8 colour) {
  name(id);
  if (colour == PaletteColour(id)) {
    colour_overrides_.erase(id);
  } else {
    colour_overrides_[id] = colour;
  }
}

void ClassRegistry::rename(int id, const std::string& new_name) {
  name(id);
  if (auto other = find(new_name); other && *other != id) {
    throw Error(ErrorCode::kInvalidArgument, "class name already in use");
  }
  names_[id] = new_name;
}

std::string PathToString(const BranchPath& path) {
  std::string s;
  for (uint8_t b : path) s.push_back(b ? '1' : '0');
  return s;
}

BranchPath PathFromString(std::string_view text) {
  BranchPath path;
  for (char c : text) {
    if (c != '0' && c != '1') {
      throw Error(ErrorCode::kParse, "branch path must contain only 0/1");
    }
    path.push_back(c == '1');
  }
  return path;
}

Rgb8 DefaultNodeColour(const BranchPath& path) {
  if (path.empty()) return {128, 128, 128};
  Rgb8 c = PaletteColour(path[0]);
  for (size_t level = 1; level < path.size(); ++level) {
    const Rgb8 mix = PaletteColour(static_cast<int>(2 * level + path[level]));
    c = {static_cast<uint8_t>((c.r + mix.r) / 2),
         static_cast<uint8_t>((c.g + mix.g) / 2),
         static_cast<uint8_t>((c.b + mix.b) / 2)};
  }
  return c;
}

LabelTree::LabelTree(int depth) : depth_(depth) {
  if (depth < 1) throw Error(ErrorCode::kInvalidArgument, "tree depth must be >= 1");
}

bool LabelTree::contains(const BranchPath& path) const {
  return path.empty() || nodes_.count(path) > 0;
}

const LabelNode* LabelTree::find(const BranchPath& path) const {
  auto it = nodes_.find(path);
  return it == nodes_.end() ? nullptr : &it->second;
}

const LabelNode* LabelTree::find_by_name(std::string_view name) const {
  for (const auto& [path, node] : nodes_) {
    if (node.name == name) return &node;
  }
  return nullptr;
}

std::vector<LabelNode> LabelTree::nodes() const {
  std::vector<LabelNode> out;
  out.reserve(nodes_.size());
  for (const auto& [path, node] : nodes_) out.push_back(node);
  return out;
}

void LabelTree::add_node(const BranchPath& path, const std::string& name,
                         std::optional<Rgb8> colour) {
  if (path.empty()) throw Error(ErrorCode::kInvalidArgument, "root is implicit");
  if (static_cast<int>(path.size()) > depth_) {
    throw Error(ErrorCode::kLimit, "node deeper than tree depth");
  }
  for (uint8_t b : path) {
    if (b > 1) throw Error(ErrorCode::kInvalidArgument, "branch bits must be 0/1");
  }
  const BranchPath parent(path.begin(), path.end() - 1);
  if (!contains(parent)) {
    throw Error(ErrorCode::kInvalidArgument,
                "parent of node " + PathToString(path) + " does not exist");
  }
  if (nodes_.count(path)) {
    throw Error(ErrorCode::kInvalidArgument,
                "node " + PathToString(path) + " already exists");
  }
  nodes_.emplace(path, LabelNode{path, name, colour ? *colour : DefaultNodeColour(path)});
}

void LabelTree::remove_node(const BranchPath& path) {
  auto it = nodes_.find(path);
  if (path.empty() || it == nodes_.end()) {
    throw Error(ErrorCode::kNotFound, "unknown tree node " + PathToString(path));
  }
  BranchPath child = path;
  child.push_back(0);
  const bool has_child0 = nodes_.count(child) > 0;
  child.back() = 1;
  if (has_child0 || nodes_.count(child) > 0) {
    throw Error(ErrorCode::kInvalidArgument, "node has children");
  }
  nodes_.erase(it);
}

void LabelTree::validate() const {
  for (const auto& [path, node] : nodes_) {
    if (path.empty() || static_cast<int>(path.size()) > depth_) {
      throw Error(ErrorCode::kInvalidArgument, "node path length out of range");
    }
    if (!contains(BranchPath(path.begin(), path.end() - 1))) {
      throw Error(ErrorCode::kInvalidArgument,
                  "tree is not prefix-consistent at " + PathToString(path));
    }
  }
}

HierEncoding LabelTree::encode(const BranchPath& node) const {
  if (node.empty() || !find(node)) {
    throw Error(ErrorCode::kNotFound, "unknown tree node " + PathToString(node));
  }
  HierEncoding enc;
  enc.label.bits = node;
  enc.bits.assign(depth_, 0);
  enc.mask.assign(depth_, 0);
  for (size_t j = 0; j < node.size(); ++j) {
    enc.bits[j] = node[j];
    enc.mask[j] = 1;
  }
  return enc;
}

BranchPath LabelTree::decode(std::span<const double> sigma,
                             int max_level) const {
  const int levels = std::min<int>(
      static_cast<int>(sigma.size()),
      max_level < 0 ? depth_ : std::min(max_level, depth_));
  BranchPath path;
  for (int j = 0; j < levels; ++j) {
    path.push_back(sigma[j] > 0.5 ? 1 : 0);
    if (!find(path)) {
      path.pop_back();
      break;
    }
  }
  return path;
}

Rgb8 LabelTree::colour(const BranchPath& path) const {
  if (const LabelNode* node = find(path)) return node->colour;
  return DefaultNodeColour(path);
}

bool LabelTree::operator==(const LabelTree& o) const {
  if (depth_ != o.depth_ || nodes_.size() != o.nodes_.size()) return false;
  for (const auto& [path, node] : nodes_) {
    const LabelNode* other = o.find(path);
    if (!other || other->name != node.name || other->colour != node.colour) {
      return false;
    }
  }
  return true;
}

double HierLoss(std::span<const double> sigma, const HierLabel& label) {
  if (label.bits.size() > sigma.size()) {
    throw Error(ErrorCode::kShapeMismatch, "label deeper than activations");
  }
  double loss = 0;
  for (size_t j = 0; j < label.bits.size(); ++j) {
    const double s = sigma[j];
    loss -= label.bits[j] ? std::log(std::max(s, kProbFloor))
                          : std::log(std::max(1.0 - s, kProbFloor));
  }
  return loss;
}

template <typename Scalar>
Scalar HierLossFromLogits(const Eigen::Ref<const VectorX<Scalar>>& logits,
                          const HierLabel& label, VectorX<Scalar>* grad) {
  if (static_cast<Eigen::Index>(label.bits.size()) > logits.size()) {
    throw Error(ErrorCode::kShapeMismatch, "label deeper than logits");
  }
  if (grad != nullptr) grad->setZero(logits.size());
  // -log(sigmoid(x)) = softplus(-x); capped at -log(floor).
  const Scalar cap = static_cast<Scalar>(-std::log(kProbFloor));
  auto softplus = [](Scalar x) {
    return std::max(x, Scalar(0)) + std::log1p(std::exp(-std::abs(x)));
  };
  Scalar loss = 0;
  for (size_t j = 0; j < label.bits.size(); ++j) {
    const Scalar x = logits[static_cast<Eigen::Index>(j)];
    const Scalar term = label.bits[j] ? softplus(-x) : softplus(x);
    loss += std::min(term, cap);
    if (grad != nullptr) {
      const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
      (*grad)[static_cast<Eigen::Index>(j)] = s - Scalar(label.bits[j]);
    }
  }
  return loss;
}

double BinaryEntropy(double p) {
  double h = 0;
  if (p > 0) h -= p * std::log(p);
  if (p < 1) h -= (1 - p) * std::log(1 - p);
  return h;
}

namespace {

nlohmann::json ColourJson(Rgb8 c) { return {c.r, c.g, c.b}; }

Rgb8 ColourFromJson(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) {
    throw Error(ErrorCode::kParse, "colour must be [r, g, b]");
  }
  return {j[0].get<uint8_t>(), j[1].get<uint8_t>(), j[2].get<uint8_t>()};
}

}  // namespace

nlohmann::json SchemaToJson(const LabelSchema& schema) {
  nlohmann::json j;
  j["mode"] = SemanticModeName(schema.mode);
  j["max_classes"] = schema.classes.max_classes();
  j["classes"] = nlohmann::json::array();
  for (int i = 0; i < schema.classes.size(); ++i) {
    j["classes"].push_back({{"id", i},
                            {"name", schema.classes.name(i)},
                            {"colour", ColourJson(schema.classes.colour(i))}});
  }
  j["tree_depth"] = schema.tree.depth();
  j["nodes"] = nlohmann::json::array();
  for (const LabelNode& node : schema.tree.nodes()) {
    j["nodes"].push_back({{"path", PathToString(node.path)},
                          {"name", node.name},
                          {"colour", ColourJson(node.colour)}});
  }
  return j;
}

LabelSchema SchemaFromJson(const nlohmann::json& j) {
  try {
    LabelSchema schema{ParseSemanticMode(j.at("mode").get<std::string>()),
                       ClassRegistry(j.value("max_classes", kDefaultMaxClasses)),
                       LabelTree(j.value("tree_depth", kDefaultTreeDepth))};
    if (j.contains("classes")) {
      for (const auto& c : j["classes"]) {
        const int id = schema.classes.add(c.at("name").get<std::string>());
        if (c.contains("id") && c["id"].get<int>() != id) {
          throw Error(ErrorCode::kParse, "class ids must be dense and ordered");
        }
        if (c.contains("colour")) {
          schema.classes.set_colour(id, ColourFromJson(c["colour"]));
        }
      }
    }
    if (j.contains("nodes")) {
      // Parents first, so sort by path length.
      std::vector<nlohmann::json> nodes(j["nodes"].begin(), j["nodes"].end());
      std::stable_sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) {
        return a.at("path").template get<std::string>().size() <
               b.at("path").template get<std::string>().size();
      });
      for (const auto& n : nodes) {
        std::optional<Rgb8> colour;
        if (n.contains("colour")) colour = ColourFromJson(n["colour"]);
        schema.tree.add_node(PathFromString(n.at("path").get<std::string>()),
                             n.value("name", std::string()), colour);
      }
    }
    return schema;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("label schema: ") + e.what());
  }
}

#define SCENELABEL_INSTANTIATE(S)                                            \
  template VectorX<S> FlatProbs<S>(const Eigen::Ref<const VectorX<S>>&);     \
  template S FlatLossFromLogits<S>(const Eigen::Ref<const VectorX<S>>&, int, \
                                   VectorX<S>*);                             \
  template S HierLossFromLogits<S>(const Eigen::Ref<const VectorX<S>>&,      \
                                   const HierLabel&, VectorX<S>*);

SCENELABEL_INSTANTIATE(float)
SCENELABEL_INSTANTIATE(double)
SCENELABEL_INSTANTIATE(long double)
#undef SCENELABEL_INSTANTIATE

}  // namespace scenelabel
