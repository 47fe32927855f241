#include "mdan/hierarchy.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <sstream>

#include "mdan/errors.hpp"

namespace mdan {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

EmotionHierarchy EmotionHierarchy::parse(std::istream& in, const std::string& source) {
    EmotionHierarchy h;
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& msg) {
        throw ParseError(source + ":" + std::to_string(lineno) + ": " + msg);
    };

    while (std::getline(in, line)) {
        ++lineno;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;

        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, '\t')) fields.push_back(trim(field));
        if (fields.size() != 3) fail("expected 'level<TAB>name<TAB>parent', got " + stripped);

        int level = 0;
        try {
            level = std::stoi(fields[0]);
        } catch (const std::exception&) {
            fail("bad level '" + fields[0] + "'");
        }
        const std::string& name = fields[1];
        const std::string& parent = fields[2];
        if (level < 1) fail("level must be >= 1");
        if (name.empty()) fail("empty class name");

        if (static_cast<std::size_t>(level) > h.levels_.size() + 1) {
            fail("non-contiguous level " + std::to_string(level));
        }
        if (static_cast<std::size_t>(level) == h.levels_.size() + 1) h.levels_.emplace_back();

        for (const auto& lv : h.levels_) {
            for (const auto& node : lv) {
                if (node.name == name) fail("duplicate name '" + name + "'");
            }
        }

        NodeRef node;
        node.name = name;
        if (level == 1) {
            if (parent != "-") fail("level-1 class '" + name + "' must use parent '-'");
        } else {
            if (parent == "-") fail("class '" + name + "' at level > 1 needs a parent");
            auto& up = h.levels_[static_cast<std::size_t>(level) - 2];
            bool found = false;
            for (std::size_t i = 0; i < up.size(); ++i) {
                if (up[i].name == parent) {
                    node.parent = i;
                    up[i].children.push_back(h.levels_[static_cast<std::size_t>(level) - 1].size());
                    found = true;
                    break;
                }
            }
            if (!found) fail("dangling parent '" + parent + "' for class '" + name + "'");
        }
        h.levels_[static_cast<std::size_t>(level) - 1].push_back(std::move(node));
    }

    if (h.levels_.empty()) throw ParseError(source + ": empty hierarchy");
    for (std::size_t l = 0; l + 1 < h.levels_.size(); ++l) {
        for (const auto& node : h.levels_[l]) {
            if (node.children.empty()) {
                throw ParseError(source + ": class '" + node.name + "' at level " +
                                 std::to_string(l + 1) + " has no children");
            }
        }
    }
    return h;
}

EmotionHierarchy EmotionHierarchy::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open hierarchy file: " + path);
    return parse(in, path);
}

void EmotionHierarchy::check_level(int level) const {
    if (level < 1 || level > depth()) {
        throw IndexError("hierarchy: level " + std::to_string(level) + " out of range, depth " +
                         std::to_string(depth()));
    }
}

std::size_t EmotionHierarchy::level_size(int level) const {
    check_level(level);
    return levels_[static_cast<std::size_t>(level) - 1].size();
}

std::vector<std::size_t> EmotionHierarchy::level_sizes() const {
    std::vector<std::size_t> sizes;
    for (const auto& lv : levels_) sizes.push_back(lv.size());
    return sizes;
}

const std::string& EmotionHierarchy::class_name(int level, std::size_t index) const {
    check_level(level);
    const auto& lv = levels_[static_cast<std::size_t>(level) - 1];
    if (index >= lv.size()) throw IndexError("hierarchy: class index out of range");
    return lv[index].name;
}

std::size_t EmotionHierarchy::class_index(int level, const std::string& name) const {
    check_level(level);
    const auto& lv = levels_[static_cast<std::size_t>(level) - 1];
    for (std::size_t i = 0; i < lv.size(); ++i) {
        if (lv[i].name == name) return i;
    }
    throw IndexError("hierarchy: unknown class '" + name + "' at level " + std::to_string(level));
}

std::size_t EmotionHierarchy::parent_of(int level, std::size_t index) const {
    check_level(level);
    if (level < 2) throw IndexError("hierarchy: level-1 classes have no parent");
    const auto& lv = levels_[static_cast<std::size_t>(level) - 1];
    if (index >= lv.size()) throw IndexError("hierarchy: class index out of range");
    return lv[index].parent;
}

const std::vector<std::size_t>& EmotionHierarchy::children_of(int level, std::size_t index) const {
    check_level(level);
    if (level >= depth()) throw IndexError("hierarchy: deepest-level classes have no children");
    const auto& lv = levels_[static_cast<std::size_t>(level) - 1];
    if (index >= lv.size()) throw IndexError("hierarchy: class index out of range");
    return lv[index].children;
}

LabelPath EmotionHierarchy::leaf_to_path(std::size_t leaf_index) const {
    const int d = depth();
    if (leaf_index >= level_size(d)) {
        throw IndexError("hierarchy: leaf index " + std::to_string(leaf_index) + " out of range");
    }
    LabelPath path;
    path.index_at_level.assign(static_cast<std::size_t>(d), 0);
    std::size_t idx = leaf_index;
    for (int level = d; level >= 1; --level) {
        path.index_at_level[static_cast<std::size_t>(level) - 1] = idx;
        if (level > 1) idx = parent_of(level, idx);
    }
    return path;
}

std::vector<double> EmotionHierarchy::aggregate_to_parent(int level,
                                                          const std::vector<double>& p) const {
    check_level(level);
    if (level < 2) throw IndexError("aggregate_to_parent: level must be >= 2");
    if (p.size() != level_size(level)) {
        throw ContractError("aggregate_to_parent: distribution length " +
                            std::to_string(p.size()) + " != level size " +
                            std::to_string(level_size(level)));
    }
    double total = 0.0;
    for (double v : p) total += v;
    if (std::abs(total - 1.0) > 1e-9) {
        throw ContractError("aggregate_to_parent: input sums to " + std::to_string(total));
    }
    std::vector<double> out(level_size(level - 1), 0.0);
    const auto& lv = levels_[static_cast<std::size_t>(level) - 1];
    for (std::size_t k = 0; k < lv.size(); ++k) out[lv[k].parent] += p[k];
    return out;
}

std::vector<double> EmotionHierarchy::aggregation_matrix(int level) const {
    check_level(level);
    if (level < 2) throw IndexError("aggregation_matrix: level must be >= 2");
    const std::size_t rows = level_size(level - 1), cols = level_size(level);
    std::vector<double> m(rows * cols, 0.0);
    const auto& lv = levels_[static_cast<std::size_t>(level) - 1];
    for (std::size_t k = 0; k < cols; ++k) m[lv[k].parent * cols + k] = 1.0;
    return m;
}

int EmotionHierarchy::violation_count(const LabelPath& predicted) const {
    if (predicted.depth() != depth()) {
        throw ContractError("violation_count: path depth " + std::to_string(predicted.depth()) +
                            " != hierarchy depth " + std::to_string(depth()));
    }
    int violations = 0;
    for (int level = 2; level <= depth(); ++level) {
        if (parent_of(level, predicted.at(level)) != predicted.at(level - 1)) ++violations;
    }
    return violations;
}

ConfusionMatrix hierarchical_confusion(const EmotionHierarchy& h, int level,
                                       const std::vector<std::size_t>& truths,
                                       const std::vector<std::size_t>& predictions) {
    if (truths.size() != predictions.size()) {
        throw ContractError("hierarchical_confusion: length mismatch");
    }
    ConfusionMatrix cm;
    cm.classes = h.level_size(level);
    cm.counts.assign(cm.classes * cm.classes, 0);
    std::size_t errors = 0, cross_parent = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const std::size_t t = truths[i], p = predictions[i];
        if (t >= cm.classes || p >= cm.classes) {
            throw IndexError("hierarchical_confusion: class index out of range");
        }
        ++cm.counts[t * cm.classes + p];
        if (t != p) {
            ++errors;
            if (level >= 2 && h.parent_of(level, t) != h.parent_of(level, p)) ++cross_parent;
        }
    }
    cm.cross_parent_error_fraction =
        errors == 0 ? 0.0 : static_cast<double>(cross_parent) / static_cast<double>(errors);
    return cm;
}

}  // namespace mdan
