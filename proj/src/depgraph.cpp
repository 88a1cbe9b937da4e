#include "s2ft/depgraph.hpp"

#include <algorithm>

#include "s2ft/error.hpp"

namespace s2ft {

namespace {

class GraphBuilder {
public:
    std::size_t weight(const std::string& name, std::size_t rows, std::size_t cols) {
        GraphNode n;
        n.kind = NodeKind::Weight;
        n.name = name;
        n.rows = rows;
        n.cols = cols;
        return add(std::move(n));
    }
    std::size_t activation(const std::string& name, std::size_t axis_len, std::size_t granule) {
        GraphNode n;
        n.kind = NodeKind::Activation;
        n.name = name;
        n.axis_len = axis_len;
        n.granule = granule;
        return add(std::move(n));
    }
    std::size_t boundary(const std::string& name) {
        GraphNode n;
        n.kind = NodeKind::Boundary;
        n.name = name;
        return add(std::move(n));
    }
    void edge(std::size_t from, std::size_t to, EdgeKind kind) { g.edges.push_back({from, to, kind}); }

    DependencyGraph g;

private:
    std::size_t add(GraphNode n) {
        n.id = g.nodes.size();
        g.nodes.push_back(std::move(n));
        return g.nodes.back().id;
    }
};

}  // namespace

const char* structure_kind_name(StructureKind k) {
    switch (k) {
        case StructureKind::MhaBasic: return "MhaBasic";
        case StructureKind::FfnBasic: return "FfnBasic";
        case StructureKind::Residual: return "Residual";
    }
    return "?";
}

std::size_t DependencyGraph::find(const std::string& name) const {
    for (const auto& n : nodes)
        if (n.name == name) return n.id;
    throw LookupError("no graph node named '" + name + "'");
}

std::vector<std::size_t> DependencyGraph::in_set(std::size_t activation) const {
    std::vector<std::size_t> out;
    for (const auto& e : edges)
        if (e.to == activation && e.kind == EdgeKind::Produce) out.push_back(e.from);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::size_t> DependencyGraph::out_set(std::size_t activation) const {
    std::vector<std::size_t> out;
    for (const auto& e : edges)
        if (e.from == activation && (e.kind == EdgeKind::Consume || e.kind == EdgeKind::Skip)) out.push_back(e.to);
    std::sort(out.begin(), out.end());
    return out;
}

std::size_t DependencyGraph::out_degree(std::size_t weight) const {
    return static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(), [&](const GraphEdge& e) {
        return e.from == weight && e.kind == EdgeKind::Produce;
    }));
}

std::size_t DependencyGraph::in_degree(std::size_t weight) const {
    return static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(), [&](const GraphEdge& e) {
        return e.to == weight && e.kind == EdgeKind::Consume;
    }));
}

bool DependencyGraph::has_skip(std::size_t activation) const {
    return std::any_of(edges.begin(), edges.end(),
                       [&](const GraphEdge& e) { return e.from == activation && e.kind == EdgeKind::Skip; });
}

void DependencyGraph::validate() const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
        if (nodes[i].id != i) throw IntegrityError("graph node ids are not dense");
    for (const auto& e : edges) {
        if (e.from >= nodes.size() || e.to >= nodes.size()) throw IntegrityError("graph edge endpoint missing");
        const NodeKind a = nodes[e.from].kind;
        const NodeKind b = nodes[e.to].kind;
        const bool ok = (e.kind == EdgeKind::Produce && a == NodeKind::Weight && b != NodeKind::Weight) ||
                        (e.kind == EdgeKind::Consume && a != NodeKind::Weight && b == NodeKind::Weight) ||
                        (e.kind == EdgeKind::Skip && a != NodeKind::Weight && b != NodeKind::Weight);
        if (!ok) throw IntegrityError("graph edge " + nodes[e.from].name + " -> " + nodes[e.to].name + " has wrong endpoint kinds");
    }
}

DependencyGraph build_graph(const TransformerBlockSpec& model) {
    model.validate();
    const std::size_t d = model.d;
    GraphBuilder b;
    std::size_t w[7];
    for (WeightId id : kAllWeights) {
        const Matrix& m = model.weight(id);
        w[static_cast<int>(id)] = b.weight(weight_name(id), m.rows(), m.cols());
    }
    auto W = [&](WeightId id) { return w[static_cast<int>(id)]; };

    const std::size_t x_in = b.boundary("block_input");
    const std::size_t attn = b.activation("attn_heads", model.h, model.head_dim());
    const std::size_t y1 = b.activation("residual_mid", d, 1);
    const std::size_t inner = b.activation("ffn_inner", model.k, 1);
    const std::size_t y = b.activation("block_output", d, 1);
    const std::size_t next = b.boundary("next_module");

    for (WeightId id : {WeightId::Q, WeightId::K, WeightId::V}) {
        b.edge(x_in, W(id), EdgeKind::Consume);
        b.edge(W(id), attn, EdgeKind::Produce);
    }
    b.edge(attn, W(WeightId::O), EdgeKind::Consume);
    b.edge(W(WeightId::O), y1, EdgeKind::Produce);
    b.edge(x_in, y1, EdgeKind::Skip);
    for (WeightId id : {WeightId::Up, WeightId::Gate}) {
        b.edge(y1, W(id), EdgeKind::Consume);
        b.edge(W(id), inner, EdgeKind::Produce);
    }
    // The skip carries residual_mid past the FFN straight to whatever follows the block.
    b.edge(y1, next, EdgeKind::Skip);
    b.edge(inner, W(WeightId::Down), EdgeKind::Consume);
    b.edge(W(WeightId::Down), y, EdgeKind::Produce);
    b.edge(y, next, EdgeKind::Skip);
    b.g.validate();
    return std::move(b.g);
}

DependencyGraph build_graph(const DeepLinearNet& net) {
    net.validate();
    GraphBuilder b;
    const std::size_t L = net.depth();
    std::vector<std::size_t> w(L + 1);
    for (std::size_t l = 1; l <= L; ++l) w[l] = b.weight("W" + std::to_string(l), net.dims[l], net.dims[l - 1]);
    const std::size_t x_in = b.boundary("input");
    b.edge(x_in, w[1], EdgeKind::Consume);
    for (std::size_t l = 1; l < L; ++l) {
        const std::size_t a = b.activation("a" + std::to_string(l), net.dims[l], 1);
        b.edge(w[l], a, EdgeKind::Produce);
        b.edge(a, w[l + 1], EdgeKind::Consume);
    }
    const std::size_t out = b.boundary("output");
    b.edge(w[L], out, EdgeKind::Produce);
    b.g.validate();
    return std::move(b.g);
}

std::vector<CoupledStructure> discover_coupled(const DependencyGraph& graph) {
    graph.validate();
    std::vector<CoupledStructure> found;
    for (const auto& node : graph.nodes) {
        if (node.kind != NodeKind::Activation) continue;
        std::vector<std::size_t> producers;
        for (std::size_t p : graph.in_set(node.id))
            if (graph.out_degree(p) == 1) producers.push_back(p);
        std::vector<std::size_t> consumers;
        for (std::size_t c : graph.out_set(node.id))
            if (graph.nodes[c].kind == NodeKind::Weight && graph.in_degree(c) == 1) consumers.push_back(c);
        if (producers.empty() || consumers.empty()) continue;

        CoupledStructure s;
        s.activation = node.name;
        s.axis_len = node.axis_len;
        s.granule = node.granule;
        for (std::size_t p : producers) s.producers.push_back(graph.nodes[p].name);
        for (std::size_t c : consumers) s.consumers.push_back(graph.nodes[c].name);
        if (graph.has_skip(node.id) || std::any_of(graph.edges.begin(), graph.edges.end(), [&](const GraphEdge& e) {
                return e.to == node.id && e.kind == EdgeKind::Skip;
            })) {
            s.kind = StructureKind::Residual;
        } else if (node.granule > 1 || node.name == "attn_heads") {
            s.kind = StructureKind::MhaBasic;
        } else {
            s.kind = StructureKind::FfnBasic;
        }
        for (std::size_t p : producers) {
            if (graph.nodes[p].rows != s.element_len()) throw IntegrityError("producer axis does not match " + node.name);
        }
        for (std::size_t c : consumers) {
            if (graph.nodes[c].cols != s.element_len()) throw IntegrityError("consumer axis does not match " + node.name);
        }
        found.push_back(std::move(s));
    }
    return found;
}

std::vector<CoupledStructure> basic_structures(const std::vector<CoupledStructure>& all) {
    std::vector<CoupledStructure> out;
    for (const auto& s : all)
        if (s.kind != StructureKind::Residual) out.push_back(s);
    return out;
}

json graph_to_json(const DependencyGraph& graph, const std::vector<CoupledStructure>& structures) {
    json j;
    j["schema_version"] = 1;
    json nodes = json::array();
    for (const auto& n : graph.nodes) {
        json jn;
        jn["id"] = n.id;
        jn["name"] = n.name;
        switch (n.kind) {
            case NodeKind::Weight:
                jn["kind"] = "weight";
                jn["shape"] = {n.rows, n.cols};
                jn["out_degree"] = graph.out_degree(n.id);
                jn["in_degree"] = graph.in_degree(n.id);
                break;
            case NodeKind::Activation: {
                jn["kind"] = "activation";
                jn["axis_len"] = n.axis_len;
                jn["granule"] = n.granule;
                json in = json::array(), out = json::array();
                for (std::size_t i : graph.in_set(n.id)) in.push_back(graph.nodes[i].name);
                for (std::size_t o : graph.out_set(n.id)) out.push_back(graph.nodes[o].name);
                jn["in"] = in;
                jn["out"] = out;
                break;
            }
            case NodeKind::Boundary: jn["kind"] = "boundary"; break;
        }
        nodes.push_back(jn);
    }
    j["nodes"] = nodes;
    json edges = json::array();
    for (const auto& e : graph.edges) {
        const char* kind = e.kind == EdgeKind::Produce ? "produce" : e.kind == EdgeKind::Consume ? "consume" : "skip";
        edges.push_back({{"from", graph.nodes[e.from].name}, {"to", graph.nodes[e.to].name}, {"kind", kind}});
    }
    j["edges"] = edges;
    json st = json::array();
    for (const auto& s : structures) {
        st.push_back({{"kind", structure_kind_name(s.kind)},
                      {"activation", s.activation},
                      {"producers", s.producers},
                      {"consumers", s.consumers},
                      {"producer_axis", axis_name(s.producer_axis)},
                      {"consumer_axis", axis_name(s.consumer_axis)},
                      {"axis_len", s.axis_len},
                      {"granule", s.granule}});
    }
    j["structures"] = st;
    return j;
}

}  // namespace s2ft
