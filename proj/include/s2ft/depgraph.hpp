#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "s2ft/io.hpp"
#include "s2ft/netspec.hpp"

namespace s2ft {

enum class NodeKind { Weight, Activation, Boundary };
enum class EdgeKind { Produce, Consume, Skip };

struct GraphNode {
    std::size_t id = 0;
    NodeKind kind = NodeKind::Weight;
    std::string name;
    std::size_t rows = 0;  ///< weight shape (out×in); unused for other kinds
    std::size_t cols = 0;
    std::size_t axis_len = 0;  ///< activations: number of slots along the shared axis
    std::size_t granule = 1;   ///< activations: elements per slot (d_h for attention)
};

/// Produce: weight -> activation. Consume: activation -> weight.
/// Skip: activation -> boundary/activation through an identity residual path.
struct GraphEdge {
    std::size_t from = 0;
    std::size_t to = 0;
    EdgeKind kind = EdgeKind::Produce;
};

struct DependencyGraph {
    std::vector<GraphNode> nodes;
    std::vector<GraphEdge> edges;

    std::size_t find(const std::string& name) const;  // throws LookupError
    /// In(A): weights with a Produce edge into A.
    std::vector<std::size_t> in_set(std::size_t activation) const;
    /// Out(A): everything A feeds, weights and skip targets alike.
    std::vector<std::size_t> out_set(std::size_t activation) const;
    /// Deg⁺(W): activations produced by W.
    std::size_t out_degree(std::size_t weight) const;
    /// Deg⁻(W): activations consumed by W.
    std::size_t in_degree(std::size_t weight) const;
    bool has_skip(std::size_t activation) const;
    /// Throws IntegrityError on dangling edges or mistyped endpoints.
    void validate() const;
};

enum class StructureKind { MhaBasic, FfnBasic, Residual };
const char* structure_kind_name(StructureKind k);

struct CoupledStructure {
    StructureKind kind = StructureKind::FfnBasic;
    std::string activation;
    std::vector<std::string> producers;  ///< permuted along their output axis (rows)
    std::vector<std::string> consumers;  ///< permuted along their input axis (cols)
    Axis producer_axis = Axis::Rows;
    Axis consumer_axis = Axis::Cols;
    std::size_t axis_len = 0;  ///< slots (heads, channels)
    std::size_t granule = 1;   ///< elements per slot

    std::size_t element_len() const { return axis_len * granule; }
};

DependencyGraph build_graph(const TransformerBlockSpec& model);
DependencyGraph build_graph(const DeepLinearNet& net);

/// Pairs satisfying both dependency conditions, ordered by activation node id.
std::vector<CoupledStructure> discover_coupled(const DependencyGraph& graph);

/// Basic (non-residual) structures only; these are the ones that get permuted.
std::vector<CoupledStructure> basic_structures(const std::vector<CoupledStructure>& all);

json graph_to_json(const DependencyGraph& graph, const std::vector<CoupledStructure>& structures);

}  // namespace s2ft
