#include "patchsweep/patch_program.hpp"

#include <chrono>
#include <cstring>
#include <stdexcept>

namespace patchsweep {

void PatchFieldStore::init(const UnstructuredMesh& mesh, const PatchSubgraph& g, double influx) {
    psi.assign(static_cast<std::size_t>(g.local_count()), 0.0);
    incoming.resize(static_cast<std::size_t>(g.local_count()));
    for (int i = 0; i < g.local_count(); ++i) {
        const Cell& cell = mesh.cells[static_cast<std::size_t>(g.local_cells[static_cast<std::size_t>(i)])];
        incoming[static_cast<std::size_t>(i)].assign(cell.faces.size(), 0.0);
        for (std::size_t f = 0; f < cell.faces.size(); ++f)
            if (cell.faces[f].neighbor == kBoundary)
                incoming[static_cast<std::size_t>(i)][f] = influx;
    }
}

void PatchFieldStore::fill_face_in(const UnstructuredMesh& mesh, const PatchSubgraph& g,
                                   CellId cell, std::vector<double>& out) const {
    const int lc = g.local_index.at(cell);
    const Cell& c = mesh.cells[static_cast<std::size_t>(cell)];
    out.assign(c.faces.size(), 0.0);
    for (std::size_t f = 0; f < c.faces.size(); ++f) {
        const CellId nb = c.faces[f].neighbor;
        const auto local = nb == kBoundary ? g.local_index.end() : g.local_index.find(nb);
        if (nb != kBoundary && local != g.local_index.end())
            out[f] = psi[static_cast<std::size_t>(local->second)];
        else
            out[f] = incoming[static_cast<std::size_t>(lc)][f];
    }
}

void PatchFieldStore::store_incoming(const UnstructuredMesh& mesh, const PatchSubgraph& g,
                                     CellId v, CellId u, double value) {
    const int lv = g.local_index.at(v);
    const Cell& cell = mesh.cells[static_cast<std::size_t>(v)];
    for (std::size_t f = 0; f < cell.faces.size(); ++f)
        if (cell.faces[f].neighbor == u) incoming[static_cast<std::size_t>(lv)][f] = value;
}

std::size_t Stream::record_count() const {
    std::size_t n = records.size();
    for (const auto& s : sections) n += s.records.size();
    return n;
}

std::size_t Stream::byte_size() const {
    std::size_t n = 5 * sizeof(std::int32_t) + sizeof(std::int64_t);
    n += records.size() * (2 * sizeof(std::int32_t) + sizeof(double));
    for (const auto& s : sections)
        n += sizeof(std::int64_t) * 2 + s.records.size() * (2 * sizeof(std::int32_t) + sizeof(double));
    return n;
}

namespace {

template <typename T>
void put(std::vector<std::byte>& out, const T& v) {
    const std::size_t at = out.size();
    out.resize(at + sizeof(T));
    std::memcpy(out.data() + at, &v, sizeof(T));
}

template <typename T>
T take(std::span<const std::byte> bytes, std::size_t& at) {
    if (at + sizeof(T) > bytes.size()) throw std::runtime_error("stream unpack: truncated buffer");
    T v;
    std::memcpy(&v, bytes.data() + at, sizeof(T));
    at += sizeof(T);
    return v;
}

void put_records(std::vector<std::byte>& out, const std::vector<StreamRecord>& records) {
    put<std::int64_t>(out, static_cast<std::int64_t>(records.size()));
    for (const StreamRecord& r : records) {
        put<std::int32_t>(out, r.u);
        put<std::int32_t>(out, r.v);
        put<double>(out, r.value);
    }
}

std::vector<StreamRecord> take_records(std::span<const std::byte> bytes, std::size_t& at) {
    const auto n = take<std::int64_t>(bytes, at);
    std::vector<StreamRecord> records(static_cast<std::size_t>(n));
    for (auto& r : records) {
        r.u = take<std::int32_t>(bytes, at);
        r.v = take<std::int32_t>(bytes, at);
        r.value = take<double>(bytes, at);
    }
    return records;
}

}  // namespace

std::vector<std::byte> pack_stream(const Stream& s) {
    std::vector<std::byte> out;
    out.reserve(s.byte_size());
    put<std::int32_t>(out, s.src_patch);
    put<std::int32_t>(out, s.src_task);
    put<std::int32_t>(out, s.tgt_patch);
    put<std::int32_t>(out, s.tgt_task);
    put<std::int32_t>(out, static_cast<std::int32_t>(s.sections.size()));
    put_records(out, s.records);
    for (const auto& sec : s.sections) {
        put<std::int64_t>(out, sec.cedge);
        put_records(out, sec.records);
    }
    return out;
}

Stream unpack_stream(std::span<const std::byte> bytes) {
    Stream s;
    std::size_t at = 0;
    s.src_patch = take<std::int32_t>(bytes, at);
    s.src_task = take<std::int32_t>(bytes, at);
    s.tgt_patch = take<std::int32_t>(bytes, at);
    s.tgt_task = take<std::int32_t>(bytes, at);
    const auto nsec = take<std::int32_t>(bytes, at);
    s.records = take_records(bytes, at);
    s.sections.resize(static_cast<std::size_t>(nsec));
    for (auto& sec : s.sections) {
        sec.cedge = take<std::int64_t>(bytes, at);
        sec.records = take_records(bytes, at);
    }
    if (at != bytes.size()) throw std::runtime_error("stream unpack: trailing bytes");
    return s;
}

void SweepAudit::reset(int angles, std::size_t cells) {
    kernel_count.assign(static_cast<std::size_t>(angles), std::vector<std::int32_t>(cells, 0));
    stamp.assign(static_cast<std::size_t>(angles), std::vector<std::int64_t>(cells, -1));
    next_stamp.store(0);
}

void PatchProgram::mark_initialized() {
    if (initialized_)
        throw std::logic_error("patch-program initialized twice");
    initialized_ = true;
}

ProgramRunResult run_program_once(PatchProgram& program, std::deque<Stream>& pending) {
    ProgramRunResult result;
    if (!program.initialized()) program.init();
    while (!pending.empty()) {
        const Stream s = std::move(pending.front());
        pending.pop_front();
        result.records_consumed += s.record_count();
        ++result.streams_consumed;
        program.input(s);
    }
    result.computed = program.compute();
    while (auto out = program.output()) result.outbound.push_back(std::move(*out));
    result.halted = program.vote_to_halt();
    return result;
}

SweepProgram::SweepProgram(const UnstructuredMesh& mesh, const PatchSubgraph& subgraph,
                           const std::vector<std::int64_t>* vertex_priority, VertexKernel kernel,
                           ProgramConfig cfg)
    : PatchProgram({subgraph.patch_id, subgraph.angle}),
      mesh_(&mesh),
      subgraph_(&subgraph),
      vertex_priority_(vertex_priority),
      kernel_(std::move(kernel)),
      cfg_(cfg) {}

void SweepProgram::enqueue(CellId cell) {
    const std::int64_t prio =
        vertex_priority_ ? (*vertex_priority_)[static_cast<std::size_t>(cell)] : 0;
    queue_.push({prio, cell});
}

void SweepProgram::init() {
    mark_initialized();
    const PatchSubgraph& g = *subgraph_;
    counts_ = g.upwind_count;
    // Upwind boundary faces carry the configured influx from the start.
    store_.init(*mesh_, g, cfg_.boundary_influx);
    for (int i = 0; i < g.local_count(); ++i)
        if (counts_[static_cast<std::size_t>(i)] == 0) enqueue(g.local_cells[static_cast<std::size_t>(i)]);
}

void SweepProgram::input(const Stream& s) {
    if (!initialized()) throw std::logic_error("patch-program input before init");
    if (s.tgt_patch != id().patch || s.tgt_task != id().task)
        throw std::logic_error("stream delivered to the wrong patch-program");
    for (const StreamRecord& r : s.records) {
        const auto it = subgraph_->local_index.find(r.v);
        if (it == subgraph_->local_index.end())
            throw std::runtime_error("stream record targets a non-local cell");
        const int lv = it->second;
        if (counts_[static_cast<std::size_t>(lv)] == 0)
            throw std::runtime_error("duplicate stream delivery: count underflow");
        store_.store_incoming(*mesh_, *subgraph_, r.v, r.u, r.value);
        ++counters_.graph_ops;
        if (--counts_[static_cast<std::size_t>(lv)] == 0) enqueue(r.v);
    }
}

std::vector<CellId> SweepProgram::compute() {
    if (!initialized()) throw std::logic_error("patch-program compute before init");
    const PatchSubgraph& g = *subgraph_;
    const std::uint64_t grain =
        cfg_.grain == 0 ? std::numeric_limits<std::uint64_t>::max() : cfg_.grain;

    std::vector<CellId> cluster;
    // Out-cut records are collected per dequeue but their payload values are
    // materialized only after the kernel ran on the cluster.
    std::vector<std::pair<std::pair<int, int>, std::size_t>> deferred;  // (key, record index)
    while (!queue_.empty() && cluster.size() < grain) {
        const CellId v = queue_.top().cell;
        queue_.pop();
        cluster.push_back(v);
        ++counters_.graph_ops;
        const int lv = g.local_index.at(v);
        for (CellId w : g.down_local[static_cast<std::size_t>(lv)]) {
            const int lw = g.local_index.at(w);
            if (counts_[static_cast<std::size_t>(lw)] == 0)
                throw std::runtime_error("downwind count underflow");
            ++counters_.graph_ops;
            if (--counts_[static_cast<std::size_t>(lw)] == 0) enqueue(w);
        }
        for (const auto& [w, tgt] : g.down_remote[static_cast<std::size_t>(lv)]) {
            Stream& s = outstreams_[{tgt, id().task}];
            if (s.records.empty() && s.sections.empty()) {
                s.src_patch = id().patch;
                s.src_task = id().task;
                s.tgt_patch = tgt;
                s.tgt_task = id().task;
            }
            deferred.emplace_back(std::make_pair(tgt, id().task), s.records.size());
            s.records.push_back({v, w, 0.0});
        }
    }
    if (cluster.empty()) return cluster;

    counters_.scheduling_events += static_cast<std::int64_t>(cluster.size());
    solve_cluster(cluster);

    for (const auto& [key, idx] : deferred) {
        StreamRecord& r = outstreams_[key].records[idx];
        r.value = store_.psi[static_cast<std::size_t>(g.local_index.at(r.u))];
    }
    computed_count_ += static_cast<std::int64_t>(cluster.size());
    if (cfg_.record_trace) cluster_trace_.push_back(cluster);
    return cluster;
}

void SweepProgram::solve_cluster(const std::vector<CellId>& cells) {
    const PatchSubgraph& g = *subgraph_;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> face_in;
    for (CellId c : cells) {
        const int lc = g.local_index.at(c);
        store_.fill_face_in(*mesh_, g, c, face_in);
        store_.psi[static_cast<std::size_t>(lc)] = kernel_(c, id().task, face_in);
        if (audit_) {
            ++audit_->kernel_count[static_cast<std::size_t>(id().task)][static_cast<std::size_t>(c)];
            audit_->stamp[static_cast<std::size_t>(id().task)][static_cast<std::size_t>(c)] =
                audit_->next_stamp.fetch_add(1);
        }
    }
    ++counters_.kernel_invocations;
    counters_.kernel_ns +=
        cfg_.virtual_clock
            ? static_cast<std::int64_t>(cells.size())
            : std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0)
                  .count();
}

std::optional<Stream> SweepProgram::output() {
    if (outstreams_.empty()) return std::nullopt;
    auto it = outstreams_.begin();
    Stream s = std::move(it->second);
    outstreams_.erase(it);
    return s;
}

bool SweepProgram::vote_to_halt() const { return queue_.empty(); }

std::int64_t SweepProgram::remaining() const {
    return static_cast<std::int64_t>(subgraph_->local_count()) - computed_count_;
}

}  // namespace patchsweep
