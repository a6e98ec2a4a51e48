#include "retroflow/templates.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <functional>
#include <set>

#include <json.hpp>

#include "retroflow/canonical.hpp"

namespace retroflow {

namespace {

using nlohmann::json;

constexpr const char* kLibraryHeader = "retroflow-library-v1";

/// Per-atom annotation strings folding origin features and mappability into
/// the canonical certificate, so patterns differing only in deltas or
/// mappable sets stay distinct.
std::vector<std::string> pattern_annotations(const PatternGraph& p) {
    std::vector<std::string> ann(p.graph.num_atoms());
    for (int i = 0; i < p.graph.num_atoms(); ++i) {
        const OriginFeatures& o = p.origin[i];
        ann[i] = std::string(o.was_mapped ? "w" : "-") + "c" + std::to_string(o.charge_delta) +
                 "h" + std::to_string(o.implicit_h_delta) + (p.is_mappable(i) ? "M" : "-");
    }
    return ann;
}

}  // namespace

bool PatternGraph::is_mappable(int atom) const {
    return std::binary_search(mappable.begin(), mappable.end(), atom);
}

std::string pattern_key(const PatternGraph& p) {
    auto ann = pattern_annotations(p);
    return canonical_key(p.graph, &ann);
}

std::string template_key(const Template& t) {
    std::string key = pattern_key(t.product_pattern) + "=>";
    for (const PatternGraph& rp : t.reactant_patterns) key += pattern_key(rp) + "|";
    key += ";";
    for (const MappingTriple& m : t.mapping)
        key += std::to_string(m.j) + "," + std::to_string(m.k) + "," +
               std::to_string(m.l) + ";";
    return key;
}

PatternGraph normalize_pattern(const PatternGraph& p, std::vector<int>* perm_out) {
    auto ann = pattern_annotations(p);
    std::vector<int> ranks = canonical_ranks(p.graph, &ann);
    PatternGraph out;
    out.graph = p.graph.permuted(ranks);
    // Canonical bond insertion order too, so equal patterns are bytewise equal.
    for (Bond& b : out.graph.bonds) {
        if (b.a > b.b) std::swap(b.a, b.b);
    }
    std::sort(out.graph.bonds.begin(), out.graph.bonds.end(),
              [](const Bond& x, const Bond& y) { return std::tie(x.a, x.b) < std::tie(y.a, y.b); });
    out.graph.rebuild_adjacency();
    out.origin.resize(p.origin.size());
    for (int i = 0; i < p.graph.num_atoms(); ++i) out.origin[ranks[i]] = p.origin[i];
    out.mappable.reserve(p.mappable.size());
    for (int m : p.mappable) out.mappable.push_back(ranks[m]);
    std::sort(out.mappable.begin(), out.mappable.end());
    if (perm_out) *perm_out = ranks;
    return out;
}

namespace {

/// Sorted (partner-product-index, order) pairs over neighbors that are paired
/// across the reaction map. Using the product index as the pair id makes the
/// two sides directly comparable.
std::vector<std::pair<int, int>> paired_neighbor_set(const MolGraph& g, int atom,
                                                     const std::vector<int>& to_other,
                                                     bool product_side) {
    std::vector<std::pair<int, int>> out;
    for (const auto& [nbr, bidx] : g.neighbors(atom)) {
        if (to_other[nbr] < 0) continue;
        int pair_id = product_side ? nbr : to_other[nbr];
        out.push_back({pair_id, static_cast<int>(g.bonds[bidx].order)});
    }
    std::sort(out.begin(), out.end());
    return out;
}

bool has_unpaired_neighbor(const MolGraph& g, int atom, const std::vector<int>& to_other) {
    for (const auto& [nbr, bidx] : g.neighbors(atom)) {
        (void)bidx;
        if (to_other[nbr] < 0) return true;
    }
    return false;
}

/// Expands `included` with whole connected blobs of unpaired atoms that touch
/// it (they cannot be reconstructed from context, so the pattern absorbs them).
void absorb_unpaired_components(const MolGraph& g, const std::vector<int>& to_other,
                                std::vector<bool>& included) {
    std::deque<int> queue;
    for (int i = 0; i < g.num_atoms(); ++i) {
        if (!included[i]) continue;
        for (const auto& [nbr, bidx] : g.neighbors(i)) {
            (void)bidx;
            if (to_other[nbr] < 0 && !included[nbr]) {
                included[nbr] = true;
                queue.push_back(nbr);
            }
        }
    }
    while (!queue.empty()) {
        int cur = queue.front();
        queue.pop_front();
        for (const auto& [nbr, bidx] : g.neighbors(cur)) {
            (void)bidx;
            if (to_other[nbr] < 0 && !included[nbr]) {
                included[nbr] = true;
                queue.push_back(nbr);
            }
        }
    }
}

}  // namespace

Template extract_template(const ReactionRecord& r, int radius, Match* origin_match) {
    if (radius < 0) throw std::invalid_argument("extract_template: negative radius");
    MolGraph R = r.merged_reactants();
    const MolGraph& P = r.product;
    auto pairs = r.atom_map_pairs();
    if (pairs.empty()) throw ExtractError(ExtractErrorKind::Unmapped, "reaction has no atom map");

    std::vector<int> p2r(P.num_atoms(), -1), r2p(R.num_atoms(), -1);
    for (auto [pi, ri] : pairs) {
        p2r[pi] = ri;
        r2p[ri] = pi;
    }

    // Reaction center: paired atoms whose attributes or bonding change across
    // the map, plus attachment points of unpaired atoms on either side.
    std::vector<bool> center(P.num_atoms(), false);
    bool any_center = false;
    for (auto [pi, ri] : pairs) {
        const Atom& pa = P.atoms[pi];
        const Atom& ra = R.atoms[ri];
        bool differs = pa.formal_charge != ra.formal_charge || pa.implicit_h != ra.implicit_h ||
                       pa.aromatic != ra.aromatic ||
                       paired_neighbor_set(P, pi, p2r, true) !=
                           paired_neighbor_set(R, ri, r2p, false) ||
                       has_unpaired_neighbor(P, pi, p2r) || has_unpaired_neighbor(R, ri, r2p);
        if (differs) {
            center[pi] = true;
            any_center = true;
        }
    }
    if (!any_center)
        throw ExtractError(ExtractErrorKind::NoChange, "no change across the atom map");

    // Cover the center plus `radius` bond hops in the product, then absorb
    // unpaired product fragments hanging off the covered area.
    std::vector<bool> in_pp = center;
    for (int hop = 0; hop < radius; ++hop) {
        std::vector<bool> cur = in_pp;
        for (int i = 0; i < P.num_atoms(); ++i) {
            if (!cur[i]) continue;
            for (const auto& [nbr, bidx] : P.neighbors(i)) {
                (void)bidx;
                in_pp[nbr] = true;
            }
        }
    }
    absorb_unpaired_components(P, p2r, in_pp);

    std::vector<int> pp_atoms;
    for (int i = 0; i < P.num_atoms(); ++i)
        if (in_pp[i]) pp_atoms.push_back(i);

    PatternGraph pp;
    pp.graph = P.induced_subgraph(pp_atoms);
    pp.origin.resize(pp_atoms.size());
    for (std::size_t j = 0; j < pp_atoms.size(); ++j) {
        int pi = pp_atoms[j];
        OriginFeatures& o = pp.origin[j];
        o.was_mapped = P.atoms[pi].map_number > 0;
        if (p2r[pi] >= 0) {
            o.charge_delta = R.atoms[p2r[pi]].formal_charge - P.atoms[pi].formal_charge;
            o.implicit_h_delta = R.atoms[p2r[pi]].implicit_h - P.atoms[pi].implicit_h;
        }
        if (o.was_mapped) pp.mappable.push_back(static_cast<int>(j));
        pp.graph.atoms[j].map_number = 0;
    }

    // Reactant side: partners of covered product atoms plus unpaired reactant
    // fragments touching them.
    std::vector<bool> in_rp(R.num_atoms(), false);
    for (int pi : pp_atoms)
        if (p2r[pi] >= 0) in_rp[p2r[pi]] = true;
    absorb_unpaired_components(R, r2p, in_rp);

    std::vector<int> rp_atoms;
    for (int i = 0; i < R.num_atoms(); ++i)
        if (in_rp[i]) rp_atoms.push_back(i);
    MolGraph rside = R.induced_subgraph(rp_atoms);

    // Split into one pattern per connected component; remember where each
    // merged-reactant atom landed for the mapping triples.
    auto comp = rside.component_ids();
    int num_comps = rside.num_components();
    std::vector<PatternGraph> rps(num_comps);
    std::vector<std::vector<int>> comp_members(num_comps);
    for (int i = 0; i < rside.num_atoms(); ++i) comp_members[comp[i]].push_back(i);
    std::vector<std::pair<int, int>> r_to_kl(R.num_atoms(), {-1, -1});
    for (int k = 0; k < num_comps; ++k) {
        PatternGraph& rp = rps[k];
        rp.graph = rside.induced_subgraph(comp_members[k]);
        rp.origin.resize(comp_members[k].size());
        for (std::size_t l = 0; l < comp_members[k].size(); ++l) {
            int ri = rp_atoms[comp_members[k][l]];
            r_to_kl[ri] = {k, static_cast<int>(l)};
            OriginFeatures& o = rp.origin[l];
            o.was_mapped = R.atoms[ri].map_number > 0;
            if (r2p[ri] >= 0) {
                o.charge_delta = R.atoms[ri].formal_charge - P.atoms[r2p[ri]].formal_charge;
                o.implicit_h_delta = R.atoms[ri].implicit_h - P.atoms[r2p[ri]].implicit_h;
            }
            if (o.was_mapped) rp.mappable.push_back(static_cast<int>(l));
            rp.graph.atoms[l].map_number = 0;
        }
    }

    Template t;
    for (std::size_t j = 0; j < pp_atoms.size(); ++j) {
        int ri = p2r[pp_atoms[j]];
        if (ri < 0) continue;
        auto [k, l] = r_to_kl[ri];
        if (k < 0) throw std::logic_error("extract_template: paired partner not covered");
        t.mapping.push_back({static_cast<int>(j), k, l});
    }

    // Canonical atom order inside each pattern, with triples remapped, then a
    // deterministic reactant-pattern order.
    std::vector<int> pp_perm;
    t.product_pattern = normalize_pattern(pp, &pp_perm);
    std::vector<std::vector<int>> rp_perms(num_comps);
    std::vector<std::string> rp_keys(num_comps);
    for (int k = 0; k < num_comps; ++k) {
        rps[k] = normalize_pattern(rps[k], &rp_perms[k]);
        rp_keys[k] = pattern_key(rps[k]);
    }
    std::vector<int> rp_order(num_comps);
    for (int k = 0; k < num_comps; ++k) rp_order[k] = k;
    std::stable_sort(rp_order.begin(), rp_order.end(),
                     [&](int a, int b) { return rp_keys[a] < rp_keys[b]; });
    std::vector<int> rp_pos(num_comps);
    for (int pos = 0; pos < num_comps; ++pos) {
        rp_pos[rp_order[pos]] = pos;
        t.reactant_patterns.push_back(std::move(rps[rp_order[pos]]));
    }
    for (MappingTriple& tr : t.mapping) {
        tr.j = pp_perm[tr.j];
        tr.l = rp_perms[tr.k][tr.l];
        tr.k = rp_pos[tr.k];
    }
    std::sort(t.mapping.begin(), t.mapping.end());

    if (origin_match) {
        origin_match->pattern_index = -1;
        origin_match->atom_indices.assign(pp_atoms.size(), -1);
        for (std::size_t j = 0; j < pp_atoms.size(); ++j)
            origin_match->atom_indices[pp_perm[j]] = pp_atoms[j];
    }
    return t;
}

int PatternLibrary::intern_pp(const PatternGraph& p) {
    std::string key = pattern_key(p);
    auto it = pp_index.find(key);
    if (it != pp_index.end()) return it->second;
    int idx = static_cast<int>(pps.size());
    pps.push_back(p);
    pp_index.emplace(std::move(key), idx);
    return idx;
}

int PatternLibrary::intern_rp(const PatternGraph& p) {
    std::string key = pattern_key(p);
    auto it = rp_index.find(key);
    if (it != rp_index.end()) return it->second;
    int idx = static_cast<int>(rps.size());
    rps.push_back(p);
    rp_index.emplace(std::move(key), idx);
    return idx;
}

int PatternLibrary::find_pp(const PatternGraph& p) const {
    auto it = pp_index.find(pattern_key(p));
    return it == pp_index.end() ? -1 : it->second;
}

int PatternLibrary::find_rp(const PatternGraph& p) const {
    auto it = rp_index.find(pattern_key(p));
    return it == rp_index.end() ? -1 : it->second;
}

PatternLibrary build_library(const std::vector<Template>& templates) {
    if (templates.empty()) throw std::invalid_argument("build_library: empty template list");
    PatternLibrary lib;
    for (const Template& t : templates) {
        lib.intern_pp(t.product_pattern);
        for (const PatternGraph& rp : t.reactant_patterns) lib.intern_rp(rp);
    }
    return lib;
}

namespace {

json pattern_to_json(const PatternGraph& p) {
    // Atom order is preserved through serialization by writing each atom's
    // index as its map number and re-sorting on load.
    MolGraph tagged = p.graph;
    for (int i = 0; i < tagged.num_atoms(); ++i) tagged.atoms[i].map_number = i + 1;
    json j;
    j["smiles"] = write_smiles(tagged);
    j["mappable"] = p.mappable;
    json origin = json::array();
    for (const OriginFeatures& o : p.origin)
        origin.push_back({o.was_mapped ? 1 : 0, o.charge_delta, o.implicit_h_delta});
    j["origin"] = origin;
    return j;
}

PatternGraph pattern_from_json(const json& j) {
    PatternGraph p;
    MolGraph parsed = parse_smiles(j.at("smiles").get<std::string>());
    std::vector<int> perm(parsed.num_atoms(), -1);
    for (int i = 0; i < parsed.num_atoms(); ++i) {
        int m = parsed.atoms[i].map_number;
        if (m < 1 || m > parsed.num_atoms())
            throw std::runtime_error("pattern load: bad atom index tag");
        perm[i] = m - 1;
    }
    p.graph = parsed.permuted(perm);
    for (Atom& a : p.graph.atoms) a.map_number = 0;
    p.mappable = j.at("mappable").get<std::vector<int>>();
    for (const auto& o : j.at("origin")) {
        OriginFeatures of;
        of.was_mapped = o.at(0).get<int>() != 0;
        of.charge_delta = o.at(1).get<int>();
        of.implicit_h_delta = o.at(2).get<int>();
        p.origin.push_back(of);
    }
    if (static_cast<int>(p.origin.size()) != p.graph.num_atoms())
        throw std::runtime_error("pattern load: origin size mismatch");
    return p;
}

}  // namespace

void PatternLibrary::save(const std::string& path) const {
    json j;
    j["pps"] = json::array();
    j["rps"] = json::array();
    for (const PatternGraph& p : pps) j["pps"].push_back(pattern_to_json(p));
    for (const PatternGraph& p : rps) j["rps"].push_back(pattern_to_json(p));
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write pattern library: " + path);
    out << kLibraryHeader << "\n" << j.dump(1) << "\n";
}

PatternLibrary PatternLibrary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read pattern library: " + path);
    std::string header;
    std::getline(in, header);
    if (header != kLibraryHeader)
        throw std::runtime_error("pattern library header mismatch: got '" + header + "'");
    json j = json::parse(in);
    PatternLibrary lib;
    for (const auto& pj : j.at("pps")) {
        PatternGraph p = pattern_from_json(pj);
        lib.pp_index.emplace(pattern_key(p), static_cast<int>(lib.pps.size()));
        lib.pps.push_back(std::move(p));
    }
    for (const auto& pj : j.at("rps")) {
        PatternGraph p = pattern_from_json(pj);
        lib.rp_index.emplace(pattern_key(p), static_cast<int>(lib.rps.size()));
        lib.rps.push_back(std::move(p));
    }
    return lib;
}

namespace {

bool atoms_compatible(const Atom& pattern, const Atom& target) {
    return pattern.symbol == target.symbol && pattern.formal_charge == target.formal_charge &&
           pattern.aromatic == target.aromatic;
}

struct Matcher {
    const PatternGraph& p;
    const MolGraph& g;
    std::vector<int> order;                                    // pattern atoms, BFS over components
    std::vector<std::vector<std::pair<int, BondOrder>>> back;  // per position: bonds to earlier atoms
    std::vector<int> assign;                                   // pattern atom -> g atom
    std::vector<bool> used;
    std::vector<Match> out;

    Matcher(const PatternGraph& p, const MolGraph& g) : p(p), g(g) {
        int m = p.graph.num_atoms();
        std::vector<bool> seen(m, false);
        for (int s = 0; s < m; ++s) {
            if (seen[s]) continue;
            std::deque<int> queue = {s};
            seen[s] = true;
            while (!queue.empty()) {
                int cur = queue.front();
                queue.pop_front();
                order.push_back(cur);
                for (const auto& [nbr, bidx] : p.graph.neighbors(cur)) {
                    (void)bidx;
                    if (!seen[nbr]) {
                        seen[nbr] = true;
                        queue.push_back(nbr);
                    }
                }
            }
        }
        std::vector<int> pos(m);
        for (int t = 0; t < m; ++t) pos[order[t]] = t;
        back.resize(m);
        for (const Bond& b : p.graph.bonds) {
            if (pos[b.a] < pos[b.b])
                back[pos[b.b]].push_back({b.a, b.order});
            else
                back[pos[b.a]].push_back({b.b, b.order});
        }
        assign.assign(m, -1);
        used.assign(g.num_atoms(), false);
    }

    bool attr_ok(int pa, int ga) const {
        return atoms_compatible(p.graph.atoms[pa], g.atoms[ga]) &&
               p.graph.degree(pa) <= g.degree(ga);
    }

    void run(int t) {
        if (t == static_cast<int>(order.size())) {
            Match m;
            m.atom_indices = assign;
            out.push_back(std::move(m));
            return;
        }
        int pa = order[t];
        if (back[t].empty()) {
            for (int ga = 0; ga < g.num_atoms(); ++ga) {
                if (used[ga] || !attr_ok(pa, ga)) continue;
                place(pa, ga, t);
            }
        } else {
            auto [anchor, need] = back[t][0];
            for (const auto& [ga, gb] : g.neighbors(assign[anchor])) {
                if (used[ga] || g.bonds[gb].order != need || !attr_ok(pa, ga)) continue;
                bool ok = true;
                for (std::size_t b = 1; b < back[t].size(); ++b) {
                    int gbond = g.find_bond(assign[back[t][b].first], ga);
                    if (gbond < 0 || g.bonds[gbond].order != back[t][b].second) {
                        ok = false;
                        break;
                    }
                }
                if (ok) place(pa, ga, t);
            }
        }
    }

    void place(int pa, int ga, int t) {
        assign[pa] = ga;
        used[ga] = true;
        run(t + 1);
        used[ga] = false;
        assign[pa] = -1;
    }
};

}  // namespace

std::vector<Match> find_matches(const PatternGraph& p, const MolGraph& g) {
    if (p.graph.num_atoms() == 0 || p.graph.num_atoms() > g.num_atoms()) return {};
    Matcher m(p, g);
    m.run(0);
    std::sort(m.out.begin(), m.out.end(),
              [](const Match& a, const Match& b) { return a.atom_indices < b.atom_indices; });
    return m.out;
}

std::vector<Match> find_matches_reference(const PatternGraph& p, const MolGraph& g) {
    int m = p.graph.num_atoms();
    if (m == 0 || m > g.num_atoms()) return {};
    std::vector<int> assign(m, -1);
    std::vector<bool> used(g.num_atoms(), false);
    std::vector<Match> out;
    // Plain injective enumeration with a full check at every leaf.
    auto valid = [&]() {
        for (int pa = 0; pa < m; ++pa)
            if (!atoms_compatible(p.graph.atoms[pa], g.atoms[assign[pa]])) return false;
        for (const Bond& b : p.graph.bonds) {
            int gb = g.find_bond(assign[b.a], assign[b.b]);
            if (gb < 0 || g.bonds[gb].order != b.order) return false;
        }
        return true;
    };
    std::function<void(int)> rec = [&](int pa) {
        if (pa == m) {
            if (valid()) {
                Match match;
                match.atom_indices = assign;
                out.push_back(std::move(match));
            }
            return;
        }
        for (int ga = 0; ga < g.num_atoms(); ++ga) {
            if (used[ga]) continue;
            assign[pa] = ga;
            used[ga] = true;
            rec(pa + 1);
            used[ga] = false;
            assign[pa] = -1;
        }
    };
    rec(0);
    std::sort(out.begin(), out.end(),
              [](const Match& a, const Match& b) { return a.atom_indices < b.atom_indices; });
    return out;
}

ApplyResult apply_template(const Template& t, const MolGraph& g, const Match& m) {
    const PatternGraph& pp = t.product_pattern;
    int np = pp.graph.num_atoms();
    if (static_cast<int>(m.atom_indices.size()) != np)
        return {false, "match size mismatch", {}};

    std::vector<int> tk(np, -1), tl(np, -1);
    for (const MappingTriple& tr : t.mapping) {
        if (tr.j < 0 || tr.j >= np || tk[tr.j] >= 0) return {false, "bad mapping triple", {}};
        tk[tr.j] = tr.k;
        tl[tr.j] = tr.l;
    }
    for (int j : pp.mappable)
        if (tk[j] < 0) return {false, "incomplete mapping", {}};

    std::vector<int> g2pp(g.num_atoms(), -1);
    for (int j = 0; j < np; ++j) {
        int ga = m.atom_indices[j];
        if (ga < 0 || ga >= g.num_atoms() || g2pp[ga] >= 0) return {false, "bad match", {}};
        g2pp[ga] = j;
    }

    // Deleting an unmapped pattern atom whose image still touches context
    // atoms would orphan those bonds.
    for (int j = 0; j < np; ++j) {
        if (tk[j] >= 0) continue;
        for (const auto& [nbr, bidx] : g.neighbors(m.atom_indices[j])) {
            (void)bidx;
            if (g2pp[nbr] < 0) return {false, "dangling attachment", {}};
        }
    }

    MolGraph out;
    std::vector<int> new_idx(g.num_atoms(), -1);
    for (int a = 0; a < g.num_atoms(); ++a) {
        int j = g2pp[a];
        if (j >= 0 && tk[j] < 0) continue;  // image of unmapped pattern atom: deleted
        Atom atom = g.atoms[a];
        atom.map_number = 0;
        if (j >= 0) {
            const OriginFeatures& of = t.reactant_patterns[tk[j]].origin[tl[j]];
            atom.formal_charge += of.charge_delta;
            atom.implicit_h += of.implicit_h_delta;
            if (atom.implicit_h < 0) return {false, "negative implicit hydrogen count", {}};
        }
        new_idx[a] = out.add_atom(std::move(atom));
    }

    // Fresh atoms for reactant-pattern atoms that are not mapped to the
    // product; mapped ones resolve to the surviving images.
    std::vector<std::vector<int>> rp_out(t.reactant_patterns.size());
    for (std::size_t k = 0; k < t.reactant_patterns.size(); ++k)
        rp_out[k].assign(t.reactant_patterns[k].graph.num_atoms(), -1);
    for (int j = 0; j < np; ++j)
        if (tk[j] >= 0) rp_out[tk[j]][tl[j]] = new_idx[m.atom_indices[j]];
    for (std::size_t k = 0; k < t.reactant_patterns.size(); ++k) {
        const MolGraph& rg = t.reactant_patterns[k].graph;
        for (int l = 0; l < rg.num_atoms(); ++l) {
            if (rp_out[k][l] >= 0) continue;
            Atom atom = rg.atoms[l];
            atom.map_number = 0;
            rp_out[k][l] = out.add_atom(std::move(atom));
        }
    }

    // Product-pattern bond images disappear; all other product bonds among
    // survivors carry over; reactant-pattern bonds are added.
    std::vector<bool> removed(g.num_bonds(), false);
    for (const Bond& pb : pp.graph.bonds) {
        int gb = g.find_bond(m.atom_indices[pb.a], m.atom_indices[pb.b]);
        if (gb < 0 || g.bonds[gb].order != pb.order)
            return {false, "match does not embed the pattern", {}};
        removed[gb] = true;
    }
    for (int b = 0; b < g.num_bonds(); ++b) {
        if (removed[b]) continue;
        int na = new_idx[g.bonds[b].a], nb = new_idx[g.bonds[b].b];
        if (na < 0 || nb < 0) continue;  // bond vanished with a deleted atom
        if (out.find_bond(na, nb) >= 0) return {false, "rewrite conflict", {}};
        out.add_bond(na, nb, g.bonds[b].order);
    }
    for (std::size_t k = 0; k < t.reactant_patterns.size(); ++k) {
        for (const Bond& rb : t.reactant_patterns[k].graph.bonds) {
            int na = rp_out[k][rb.a], nb = rp_out[k][rb.b];
            if (out.find_bond(na, nb) >= 0) return {false, "rewrite conflict", {}};
            out.add_bond(na, nb, rb.order);
        }
    }

    if (out.first_valence_violation() >= 0) return {false, "valence violation", {}};

    ApplyResult res;
    res.ok = true;
    res.reactants = split_components(out);
    std::sort(res.reactants.begin(), res.reactants.end(),
              [](const MolGraph& a, const MolGraph& b) {
                  return canonical_key(a) < canonical_key(b);
              });
    return res;
}

namespace {

/// One attempted reverse rewrite for a fixed combination of disjoint
/// reactant-pattern embeddings. Returns false when the combination is
/// chemically or structurally invalid (caller just skips it).
bool reverse_rewrite(const Template& t, const MolGraph& G,
                     const std::vector<const Match*>& chosen, MolGraph& product_out) {
    int K = static_cast<int>(t.reactant_patterns.size());
    std::vector<int> g2k(G.num_atoms(), -1), g2l(G.num_atoms(), -1);
    for (int k = 0; k < K; ++k) {
        const std::vector<int>& idx = chosen[k]->atom_indices;
        for (std::size_t l = 0; l < idx.size(); ++l) {
            g2k[idx[l]] = k;
            g2l[idx[l]] = static_cast<int>(l);
        }
    }

    // rp atom -> pp atom (or -1 when the rp atom is not mapped).
    std::vector<std::vector<int>> rp2pp(K);
    for (int k = 0; k < K; ++k) rp2pp[k].assign(t.reactant_patterns[k].graph.num_atoms(), -1);
    for (const MappingTriple& tr : t.mapping) rp2pp[tr.k][tr.l] = tr.j;

    // Unmapped rp-atom images get deleted; they must not touch anything
    // outside their own pattern's image.
    for (int a = 0; a < G.num_atoms(); ++a) {
        int k = g2k[a];
        if (k < 0 || rp2pp[k][g2l[a]] >= 0) continue;
        for (const auto& [nbr, bidx] : G.neighbors(a)) {
            (void)bidx;
            if (g2k[nbr] != k) return false;
        }
    }

    MolGraph out;
    std::vector<int> new_idx(G.num_atoms(), -1);
    for (int a = 0; a < G.num_atoms(); ++a) {
        int k = g2k[a];
        if (k >= 0 && rp2pp[k][g2l[a]] < 0) continue;  // deleted with the rewrite
        Atom atom = G.atoms[a];
        atom.map_number = 0;
        if (k >= 0) {  // mapped image: peel off the retro-direction deltas
            const OriginFeatures& of = t.reactant_patterns[k].origin[g2l[a]];
            atom.formal_charge -= of.charge_delta;
            atom.implicit_h -= of.implicit_h_delta;
            if (atom.implicit_h < 0) return false;
        }
        new_idx[a] = out.add_atom(std::move(atom));
    }

    const PatternGraph& pp = t.product_pattern;
    std::vector<int> pp_out(pp.graph.num_atoms(), -1);
    for (const MappingTriple& tr : t.mapping)
        pp_out[tr.j] = new_idx[chosen[tr.k]->atom_indices[tr.l]];
    for (int j = 0; j < pp.graph.num_atoms(); ++j) {
        if (pp_out[j] >= 0) continue;
        Atom atom = pp.graph.atoms[j];
        atom.map_number = 0;
        pp_out[j] = out.add_atom(std::move(atom));
    }

    std::vector<bool> removed(G.num_bonds(), false);
    for (int k = 0; k < K; ++k) {
        for (const Bond& rb : t.reactant_patterns[k].graph.bonds) {
            int gb = G.find_bond(chosen[k]->atom_indices[rb.a], chosen[k]->atom_indices[rb.b]);
            if (gb < 0) return false;
            removed[gb] = true;
        }
    }
    for (int b = 0; b < G.num_bonds(); ++b) {
        if (removed[b]) continue;
        int na = new_idx[G.bonds[b].a], nb = new_idx[G.bonds[b].b];
        if (na < 0 || nb < 0) continue;
        if (out.find_bond(na, nb) >= 0) return false;
        out.add_bond(na, nb, G.bonds[b].order);
    }
    for (const Bond& pb : pp.graph.bonds) {
        int na = pp_out[pb.a], nb = pp_out[pb.b];
        if (out.find_bond(na, nb) >= 0) return false;
        out.add_bond(na, nb, pb.order);
    }

    if (out.first_valence_violation() >= 0) return false;

    // The rewritten pattern area must land in exactly one component — that
    // component is the product; spectators and byproducts are dropped.
    auto comp = out.component_ids();
    int product_comp = -1;
    for (int j = 0; j < pp.graph.num_atoms(); ++j) {
        int c = comp[pp_out[j]];
        if (product_comp < 0) product_comp = c;
        if (c != product_comp) return false;
    }
    if (product_comp < 0) return false;
    std::vector<int> members;
    for (int i = 0; i < out.num_atoms(); ++i)
        if (comp[i] == product_comp) members.push_back(i);
    product_out = out.induced_subgraph(members);
    return true;
}

}  // namespace

std::vector<MolGraph> forward_apply(const Template& t, const std::vector<MolGraph>& reactants) {
    MolGraph G = merge_graphs(reactants);
    int K = static_cast<int>(t.reactant_patterns.size());
    if (K == 0) return {};
    std::vector<std::vector<Match>> matches(K);
    for (int k = 0; k < K; ++k) {
        matches[k] = find_matches(t.reactant_patterns[k], G);
        if (matches[k].empty()) return {};
    }

    std::vector<const Match*> chosen(K, nullptr);
    std::vector<bool> used(G.num_atoms(), false);
    std::set<std::string> seen_keys;
    std::vector<std::pair<std::string, MolGraph>> products;

    std::function<void(int)> rec = [&](int k) {
        if (k == K) {
            MolGraph product;
            if (!reverse_rewrite(t, G, chosen, product)) return;
            std::string key = canonical_key(product);
            if (seen_keys.insert(key).second) products.push_back({std::move(key), std::move(product)});
            return;
        }
        for (const Match& m : matches[k]) {
            bool overlap = false;
            for (int ga : m.atom_indices) {
                if (used[ga]) {
                    overlap = true;
                    break;
                }
            }
            if (overlap) continue;
            for (int ga : m.atom_indices) used[ga] = true;
            chosen[k] = &m;
            rec(k + 1);
            for (int ga : m.atom_indices) used[ga] = false;
        }
    };
    rec(0);

    std::sort(products.begin(), products.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<MolGraph> out;
    out.reserve(products.size());
    for (auto& [key, mol] : products) {
        (void)key;
        out.push_back(std::move(mol));
    }
    return out;
}

}  // namespace retroflow
