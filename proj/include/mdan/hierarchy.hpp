#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

namespace mdan {

// Per-level class indices for one sample, from level 1 (coarsest) to the
// deepest level.
struct LabelPath {
    std::vector<std::size_t> index_at_level;

    std::size_t at(int level) const { return index_at_level.at(level - 1); }
    int depth() const { return static_cast<int>(index_at_level.size()); }
    bool operator==(const LabelPath&) const = default;
};

struct ConfusionMatrix {
    std::size_t classes = 0;
    std::vector<std::size_t> counts;  // row = truth, column = prediction
    // Fraction of misclassified samples whose predicted class has a different
    // parent than the true class; 0 when there are no errors.
    double cross_parent_error_fraction = 0.0;

    std::size_t at(std::size_t truth, std::size_t pred) const {
        return counts[truth * classes + pred];
    }
};

// Rooted multi-level tree of emotion categories. Immutable after parse;
// class order within a level follows the file and fixes the prediction
// vector layout.
class EmotionHierarchy {
  public:
    static EmotionHierarchy parse(std::istream& in, const std::string& source = "<input>");
    static EmotionHierarchy load(const std::string& path);

    int depth() const { return static_cast<int>(levels_.size()); }
    std::size_t level_size(int level) const;
    std::vector<std::size_t> level_sizes() const;
    const std::string& class_name(int level, std::size_t index) const;
    std::size_t class_index(int level, const std::string& name) const;

    // Index of the parent class at level-1; level must be >= 2.
    std::size_t parent_of(int level, std::size_t index) const;
    // Indices at level+1 of the children of a class; level must be < depth.
    const std::vector<std::size_t>& children_of(int level, std::size_t index) const;

    LabelPath leaf_to_path(std::size_t leaf_index) const;

    // Children-sum aggregation of a level-`level` distribution to level-1.
    std::vector<double> aggregate_to_parent(int level, const std::vector<double>& p) const;
    // Constant 0/1 matrix [level_size(level-1) x level_size(level)], row-major,
    // implementing the same aggregation as a matrix product.
    std::vector<double> aggregation_matrix(int level) const;

    // Number of consecutive level pairs where the predicted child's parent
    // differs from the predicted parent.
    int violation_count(const LabelPath& predicted) const;

  private:
    struct NodeRef {
        std::string name;
        std::size_t parent = 0;              // index at level-1, unused at level 1
        std::vector<std::size_t> children;   // indices at level+1
    };
    std::vector<std::vector<NodeRef>> levels_;

    void check_level(int level) const;
};

ConfusionMatrix hierarchical_confusion(const EmotionHierarchy& h, int level,
                                       const std::vector<std::size_t>& truths,
                                       const std::vector<std::size_t>& predictions);

}  // namespace mdan
