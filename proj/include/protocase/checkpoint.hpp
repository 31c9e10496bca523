#pragma once

// Binary checkpoint: magic "IABL", format version, length-prefixed named
// tensor records (name, shape, raw little-endian f64), then named 8-byte
// scalars, then named strings. Identical bytes imply an identical model.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "protocase/common.hpp"
#include "protocase/network.hpp"
#include "protocase/rng.hpp"

namespace protocase {

struct TrainProgress {
    bool warmup_done = false;
    int next_cycle = 1;  // 1-based index of the next A-cycle to run
    bool converged = false;
    bool finished = false;
    double prev_cycle_loss = 0.0;
    bool has_prev_cycle_loss = false;
};

struct Checkpoint {
    ModelState state;
    TrainProgress progress;
    std::array<std::uint64_t, 4> rng_state{};
    std::vector<double> loss_history;
};

namespace ckpt_detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;
    std::string origin;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw DataError("checkpoint truncated: " + origin);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

class Builder {
public:
    void tensor(const std::string& name, const std::vector<int>& shape,
                const std::vector<double>& data) {
        tensor_names_.push_back(name);
        tensor_shapes_.push_back(shape);
        tensor_data_.push_back(data);
    }
    void scalar_u64(const std::string& name, std::uint64_t v) { scalars_.emplace_back(name, v); }
    void scalar_i64(const std::string& name, std::int64_t v) {
        scalars_.emplace_back(name, static_cast<std::uint64_t>(v));
    }
    void scalar_f64(const std::string& name, double v) {
        scalars_.emplace_back(name, std::bit_cast<std::uint64_t>(v));
    }
    void scalar_bool(const std::string& name, bool v) { scalars_.emplace_back(name, v ? 1u : 0u); }
    void string(const std::string& name, const std::string& v) { strings_.emplace_back(name, v); }

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out = {'I', 'A', 'B', 'L'};
        put_u32(out, 1);  // format version
        put_u32(out, static_cast<std::uint32_t>(tensor_names_.size()));
        for (std::size_t i = 0; i < tensor_names_.size(); ++i) {
            put_str(out, tensor_names_[i]);
            put_u32(out, static_cast<std::uint32_t>(tensor_shapes_[i].size()));
            for (int d : tensor_shapes_[i]) put_u32(out, static_cast<std::uint32_t>(d));
            for (double v : tensor_data_[i]) put_u64(out, std::bit_cast<std::uint64_t>(v));
        }
        put_u32(out, static_cast<std::uint32_t>(scalars_.size()));
        for (const auto& [n, v] : scalars_) {
            put_str(out, n);
            put_u64(out, v);
        }
        put_u32(out, static_cast<std::uint32_t>(strings_.size()));
        for (const auto& [n, v] : strings_) {
            put_str(out, n);
            put_str(out, v);
        }
        return out;
    }

private:
    std::vector<std::string> tensor_names_;
    std::vector<std::vector<int>> tensor_shapes_;
    std::vector<std::vector<double>> tensor_data_;
    std::vector<std::pair<std::string, std::uint64_t>> scalars_;
    std::vector<std::pair<std::string, std::string>> strings_;
};

struct Parsed {
    std::vector<std::pair<std::string, ad::Tensor>> tensors;
    std::vector<std::pair<std::string, std::uint64_t>> scalars;
    std::vector<std::pair<std::string, std::string>> strings;
    std::string origin;

    const ad::Tensor& tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw DataError("checkpoint missing tensor '" + name + "': " + origin);
    }
    std::uint64_t scalar(const std::string& name) const {
        for (const auto& [n, v] : scalars)
            if (n == name) return v;
        throw DataError("checkpoint missing scalar '" + name + "': " + origin);
    }
    double scalar_f64(const std::string& name) const { return std::bit_cast<double>(scalar(name)); }
    std::int64_t scalar_i64(const std::string& name) const {
        return static_cast<std::int64_t>(scalar(name));
    }
    bool scalar_bool(const std::string& name) const { return scalar(name) != 0; }
    const std::string& string(const std::string& name) const {
        for (const auto& [n, v] : strings)
            if (n == name) return v;
        throw DataError("checkpoint missing string '" + name + "': " + origin);
    }
};

inline Parsed parse(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "IABL", 4) != 0)
        throw DataError("malformed checkpoint (bad magic): " + origin);
    Reader r{bytes, 4, origin};
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + origin);
    Parsed p;
    p.origin = origin;
    const std::uint32_t nt = r.u32();
    for (std::uint32_t i = 0; i < nt; ++i) {
        const std::string name = r.str();
        const std::uint32_t nd = r.u32();
        std::vector<int> shape(nd);
        for (auto& d : shape) d = static_cast<int>(r.u32());
        auto t = ad::make_tensor(shape);
        for (auto& v : t->data) v = std::bit_cast<double>(r.u64());
        p.tensors.emplace_back(name, std::move(t));
    }
    const std::uint32_t ns = r.u32();
    for (std::uint32_t i = 0; i < ns; ++i) {
        const std::string name = r.str();
        p.scalars.emplace_back(name, r.u64());
    }
    const std::uint32_t nstr = r.u32();
    for (std::uint32_t i = 0; i < nstr; ++i) {
        const std::string name = r.str();
        p.strings.emplace_back(name, r.str());
    }
    if (r.pos != bytes.size()) throw DataError("checkpoint has trailing bytes: " + origin);
    return p;
}

}  // namespace ckpt_detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
    ckpt_detail::Builder b;
    const auto& st = ck.state;

    b.scalar_i64("model.input_h", st.input_h);
    b.scalar_i64("model.input_w", st.input_w);
    b.scalar_f64("model.pool_fraction", st.pool_fraction);
    b.scalar_f64("model.epsilon_sim", st.epsilon_sim);
    b.scalar_bool("model.stage_b_done", st.stage_b_done);
    b.scalar_i64("model.in_channels", st.extractor_cfg.in_channels);
    b.scalar_i64("model.n_layers", static_cast<std::int64_t>(st.extractor_cfg.layers.size()));
    for (std::size_t i = 0; i < st.extractor_cfg.layers.size(); ++i) {
        const auto& l = st.extractor_cfg.layers[i];
        const std::string p = "layer." + std::to_string(i) + ".";
        b.scalar_i64(p + "kind", static_cast<int>(l.kind));
        b.scalar_i64(p + "out_channels", l.out_channels);
        b.scalar_i64(p + "kernel", l.kernel);
        b.scalar_i64(p + "stride", l.stride);
        b.scalar_i64(p + "padding", l.padding);
        b.scalar_i64(p + "act", static_cast<int>(l.act));
        b.scalar_bool(p + "addon", l.addon);
        b.scalar_i64(p + "pool_window", l.pool_window);
    }

    auto st_mut = const_cast<ModelState&>(st);
    for (const auto& [name, t] : st_mut.named_parameters()) b.tensor(name, t->shape, t->data);

    b.scalar_i64("model.n_prototypes", st.num_prototypes());
    for (int j = 0; j < st.num_prototypes(); ++j) {
        const auto& pr = st.prototypes[j];
        const std::string p = "prototype." + std::to_string(j) + ".";
        b.scalar_i64(p + "margin", static_cast<int>(pr.margin));
        b.scalar_bool(p + "active", pr.active);
        b.scalar_bool(p + "has_source", pr.has_source);
        b.scalar_i64(p + "source_row", pr.source_row);
        b.scalar_i64(p + "source_col", pr.source_col);
        b.string(p + "source_id", pr.source_id);
    }

    b.tensor("h2.weights", {kNumMarginTypes},
             {st.h2_weights[0], st.h2_weights[1], st.h2_weights[2]});
    b.scalar_f64("h2.shift", st.h2_shift);
    b.scalar_f64("h2.scale", st.h2_scale);

    b.scalar_bool("train.warmup_done", ck.progress.warmup_done);
    b.scalar_i64("train.next_cycle", ck.progress.next_cycle);
    b.scalar_bool("train.converged", ck.progress.converged);
    b.scalar_bool("train.finished", ck.progress.finished);
    b.scalar_f64("train.prev_cycle_loss", ck.progress.prev_cycle_loss);
    b.scalar_bool("train.has_prev_cycle_loss", ck.progress.has_prev_cycle_loss);
    for (int i = 0; i < 4; ++i)
        b.scalar_u64("rng.s" + std::to_string(i), ck.rng_state[static_cast<std::size_t>(i)]);
    b.tensor("history.loss_total", {std::max<int>(1, static_cast<int>(ck.loss_history.size()))},
             ck.loss_history.empty() ? std::vector<double>{0.0} : ck.loss_history);
    b.scalar_i64("history.n", static_cast<std::int64_t>(ck.loss_history.size()));

    return b.serialize();
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    const auto bytes = serialize_checkpoint(ck);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("missing checkpoint: " + path);
    f.seekg(0, std::ios::end);
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(n));
    f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw DataError("checkpoint read failed: " + path);

    const auto p = ckpt_detail::parse(bytes, path);
    Checkpoint ck;
    auto& st = ck.state;
    st.input_h = static_cast<int>(p.scalar_i64("model.input_h"));
    st.input_w = static_cast<int>(p.scalar_i64("model.input_w"));
    st.pool_fraction = p.scalar_f64("model.pool_fraction");
    st.epsilon_sim = p.scalar_f64("model.epsilon_sim");
    st.stage_b_done = p.scalar_bool("model.stage_b_done");
    st.extractor_cfg.in_channels = static_cast<int>(p.scalar_i64("model.in_channels"));
    const auto n_layers = p.scalar_i64("model.n_layers");
    for (std::int64_t i = 0; i < n_layers; ++i) {
        const std::string pre = "layer." + std::to_string(i) + ".";
        LayerSpec l;
        l.kind = static_cast<LayerSpec::Kind>(p.scalar_i64(pre + "kind"));
        l.out_channels = static_cast<int>(p.scalar_i64(pre + "out_channels"));
        l.kernel = static_cast<int>(p.scalar_i64(pre + "kernel"));
        l.stride = static_cast<int>(p.scalar_i64(pre + "stride"));
        l.padding = static_cast<int>(p.scalar_i64(pre + "padding"));
        l.act = static_cast<Activation>(p.scalar_i64(pre + "act"));
        l.addon = p.scalar_bool(pre + "addon");
        l.pool_window = static_cast<int>(p.scalar_i64(pre + "pool_window"));
        st.extractor_cfg.layers.push_back(l);
    }
    std::size_t conv_idx = 0;
    for (const auto& l : st.extractor_cfg.layers) {
        if (l.kind != LayerSpec::Kind::Conv) continue;
        const std::string pre = "extractor.conv" + std::to_string(conv_idx);
        const auto& wt = p.tensor(pre + ".weight");
        const auto& bt = p.tensor(pre + ".bias");
        st.extractor.push_back({ad::make_tensor(wt->shape, wt->data, true),
                                ad::make_tensor(bt->shape, bt->data, true)});
        ++conv_idx;
    }
    const auto m = p.scalar_i64("model.n_prototypes");
    for (std::int64_t j = 0; j < m; ++j) {
        const std::string pre = "prototype." + std::to_string(j);
        Prototype pr;
        const auto& v = p.tensor(pre);
        pr.vec = ad::make_tensor(v->shape, v->data, true);
        pr.margin = static_cast<MarginType>(p.scalar_i64(pre + ".margin"));
        pr.active = p.scalar_bool(pre + ".active");
        pr.has_source = p.scalar_bool(pre + ".has_source");
        pr.source_row = static_cast<int>(p.scalar_i64(pre + ".source_row"));
        pr.source_col = static_cast<int>(p.scalar_i64(pre + ".source_col"));
        pr.source_id = p.string(pre + ".source_id");
        st.prototypes.push_back(std::move(pr));
    }
    const auto& h1 = p.tensor("h1.weight");
    st.h1 = ad::make_tensor(h1->shape, h1->data, true);
    const auto& h2w = p.tensor("h2.weights");
    for (int t = 0; t < kNumMarginTypes; ++t) st.h2_weights[t] = h2w->data[t];
    st.h2_shift = p.scalar_f64("h2.shift");
    st.h2_scale = p.scalar_f64("h2.scale");

    ck.progress.warmup_done = p.scalar_bool("train.warmup_done");
    ck.progress.next_cycle = static_cast<int>(p.scalar_i64("train.next_cycle"));
    ck.progress.converged = p.scalar_bool("train.converged");
    ck.progress.finished = p.scalar_bool("train.finished");
    ck.progress.prev_cycle_loss = p.scalar_f64("train.prev_cycle_loss");
    ck.progress.has_prev_cycle_loss = p.scalar_bool("train.has_prev_cycle_loss");
    for (int i = 0; i < 4; ++i)
        ck.rng_state[static_cast<std::size_t>(i)] = p.scalar("rng.s" + std::to_string(i));
    const auto hist_n = p.scalar_i64("history.n");
    const auto& hist = p.tensor("history.loss_total");
    ck.loss_history.assign(hist->data.begin(), hist->data.begin() + hist_n);
    return ck;
}

}  // namespace protocase
