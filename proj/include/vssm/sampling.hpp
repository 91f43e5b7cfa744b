#pragma once

// Generation: one-shot sampling over the whole horizon, chunked sampling
// from carried layer states, and the sequential SSM baseline sampler.
//
// Every random quantity is keyed by its absolute position: latent z_{t,c}
// uses (Role::latent, t, c, n) and output x_{t,d} uses (Role::output, t, d).
// Together with the row-stable matmul this makes any chunk partition of the
// horizon produce bit-identical sequences.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "vssm/binio.hpp"
#include "vssm/errors.hpp"
#include "vssm/model.hpp"
#include "vssm/ops.hpp"
#include "vssm/rng.hpp"
#include "vssm/ssm.hpp"

namespace vssm {

struct SampleOptions {
    /// Emit the decoder mean w_t instead of a draw from N(w_t, sigma^2).
    bool mean_only = false;
    /// Parallel scan is faster on long horizons but only matches chunked
    /// generation up to rounding; sequential keeps every path bit-identical.
    ScanMode scan = ScanMode::sequential;
};

namespace detail {

inline std::size_t prompt_length(const auto& prompt, std::size_t D) {
    if (prompt.empty()) return 0;
    require(prompt.rank() == 2 && prompt.dim(1) == D,
            "prompt must be [C, " + std::to_string(D) + "], got " + shape_str(prompt.shape()));
    return prompt.dim(0);
}

// One-hot latents [1, W, Z*N] by Gumbel-max over logits [1, W, Z, N]; rows are positions t0..t0+W-1.
template <class S>
Tensor<S> draw_latents(const Tensor<S>& logits, std::size_t t0, std::size_t Z, std::size_t N, const CounterRng& rng) {
    const std::size_t W = logits.numel() / (Z * N);
    Tensor<S> z(Shape{1, W, Z * N});
    for (std::size_t t = 0; t < W; ++t)
        for (std::size_t c = 0; c < Z; ++c) {
            const S* v = logits.data().data() + (t * Z + c) * N;
            std::size_t best = 0;
            double best_score = -INFINITY;
            for (std::size_t n = 0; n < N; ++n) {
                const double s = double(v[n]) + rng.gumbel(Role::latent, t0 + t, c, n);
                if (s > best_score) {
                    best_score = s;
                    best = n;
                }
            }
            z[(t * Z + c) * N + best] = S(1);
        }
    return z;
}

// x_t = w_t + sigma * eps_t for rows t0..t0+W-1 (or w_t when mean_only).
template <class S>
void emit_outputs(const Tensor<S>& w, std::size_t t0, std::size_t D, double sigma, bool mean_only, const CounterRng& rng,
                  S* out) {
    const std::size_t W = w.numel() / D;
    for (std::size_t t = 0; t < W; ++t)
        for (std::size_t d = 0; d < D; ++d) {
            const S mean = w[t * D + d];
            out[t * D + d] = mean_only ? mean : S(double(mean) + sigma * rng.normal(Role::output, t0 + t, d));
        }
}

}  // namespace detail

/// Samples x_1..T given the prompt x_1..C ([C, D]; empty for C = 0). Two stack
/// evaluations regardless of T: the partial posterior over the padded prompt
/// and the decoder over all sampled latents.
template <class S>
Tensor<S> sample_full(const VssmModel<S>& m, const Tensor<S>& prompt, std::size_t T, const CounterRng& rng,
                      SampleOptions opt = {}) {
    const VssmHyper& h = m.hyper;
    const std::size_t C = detail::prompt_length(prompt, h.D);
    auto pp = make_padded_prompt(prompt, C, T, h.D);
    Tensor<S> out(Shape{T, h.D});
    std::copy_n(prompt.data().data(), C * h.D, out.data().data());
    if (T == 0) return out;

    RowStableMatmul stable;
    Tape<S> tape(false);
    Binding<S> p(tape, m.params, false);
    Var<S> v = encode_partial(p, h, tape.constant(pp.values.reshaped(Shape{1, T, h.D + 1})), opt.scan).y;
    Tensor<S> z = detail::draw_latents(v.value(), 0, h.Z, h.N, rng);
    Var<S> w = decode(p, h, tape.constant(std::move(z)), opt.scan).y;
    if (C < T) {
        Tensor<S> tail(Shape{T - C, h.D},
                       std::vector<S>(w.value().data().begin() + C * h.D, w.value().data().end()));
        detail::emit_outputs(tail, C, h.D, h.sigma, opt.mean_only, rng, out.data().data() + C * h.D);
    }
    return out;
}

template <class S>
struct GenerationSession {
    std::size_t C = 0;  // positions committed so far
    std::size_t T = 0;  // target length
    std::size_t D = 0;
    LayerStates<S> partial;  // h_C of the partial-posterior stack
    LayerStates<S> decoder;  // h_C of the decoder stack
    std::vector<S> outputs;  // x_1..C, row-major [C, D]
    StreamKey key;
    SampleOptions options;

    bool done() const { return C == T; }
    Tensor<S> sequence() const { return Tensor<S>(Shape{C, D}, outputs); }

    friend bool operator==(const GenerationSession& a, const GenerationSession& b) {
        return a.C == b.C && a.T == b.T && a.D == b.D && a.partial == b.partial && a.decoder == b.decoder &&
               a.outputs == b.outputs && a.key == b.key && a.options.mean_only == b.options.mean_only &&
               a.options.scan == b.options.scan;
    }
};

/// Processes the prompt through both stacks; latents for 1..C are drawn from
/// the partial posterior given the prompt and decoded.
template <class S>
GenerationSession<S> open_session(const VssmModel<S>& m, const Tensor<S>& prompt, std::size_t T, const CounterRng& rng,
                                  SampleOptions opt = {}) {
    const VssmHyper& h = m.hyper;
    const std::size_t C = detail::prompt_length(prompt, h.D);
    if (C > T) throw UsageError("prompt length C=" + std::to_string(C) + " exceeds T=" + std::to_string(T));
    GenerationSession<S> s;
    s.C = C;
    s.T = T;
    s.D = h.D;
    s.key = rng.key();
    s.options = opt;
    s.outputs.assign(prompt.data().begin(), prompt.data().begin() + C * h.D);
    if (C == 0) {
        s.partial = LayerStates<S>::zeros(h.partial_config(), 1);
        s.decoder = LayerStates<S>::zeros(h.decoder_config(), 1);
        return s;
    }
    RowStableMatmul stable;
    Tape<S> tape(false);
    Binding<S> p(tape, m.params, false);
    auto pp = make_padded_prompt(prompt, C, C, h.D);
    auto par = encode_partial(p, h, tape.constant(pp.values.reshaped(Shape{1, C, h.D + 1})), opt.scan);
    Tensor<S> z = detail::draw_latents(par.y.value(), 0, h.Z, h.N, rng);
    auto dec = decode(p, h, tape.constant(std::move(z)), opt.scan);
    s.partial = std::move(par.final);
    s.decoder = std::move(dec.final);
    return s;
}

/// Advances the session by W positions and returns x_{C+1..C+W} as [W, D].
template <class S>
Tensor<S> step_chunk(const VssmModel<S>& m, GenerationSession<S>& s, std::size_t W) {
    const VssmHyper& h = m.hyper;
    require(s.D == h.D, "step_chunk: session does not belong to this model");
    if (s.C + W > s.T)
        throw UsageError("step_chunk: chunk of " + std::to_string(W) + " overruns T=" + std::to_string(s.T) +
                         " from C=" + std::to_string(s.C));
    Tensor<S> out(Shape{W, h.D});
    if (W == 0) return out;
    const CounterRng rng(s.key);
    RowStableMatmul stable;
    Tape<S> tape(false);
    Binding<S> p(tape, m.params, false);
    auto par = encode_partial(p, h, tape.constant(empty_tokens<S>(W, h.D)), s.options.scan, &s.partial);
    Tensor<S> z = detail::draw_latents(par.y.value(), s.C, h.Z, h.N, rng);
    auto dec = decode(p, h, tape.constant(std::move(z)), s.options.scan, &s.decoder);
    detail::emit_outputs(dec.y.value(), s.C, h.D, h.sigma, s.options.mean_only, rng, out.data().data());
    s.partial = std::move(par.final);
    s.decoder = std::move(dec.final);
    s.outputs.insert(s.outputs.end(), out.data().begin(), out.data().end());
    s.C += W;
    return out;
}

// --- Session serialization ----------------------------------------------------

inline constexpr char kSessionMagic[4] = {'V', 'S', 'S', 'B'};
inline constexpr std::uint32_t kSessionVersion = 1;

namespace detail {

template <class S>
void write_states(binio::Writer& w, const LayerStates<S>& st) {
    w.u32(static_cast<std::uint32_t>(st.h.size()));
    w.u64(st.t);
    for (const auto& h : st.h) {
        w.u64(h.dim(0));
        w.u64(h.dim(1));
        w.f32s(h.data().data(), h.numel());
    }
}

template <class S>
LayerStates<S> read_states(binio::Reader& r) {
    LayerStates<S> st;
    const std::uint32_t layers = r.u32();
    if (layers > 4096) r.fail("implausible layer count");
    st.t = r.u64();
    for (std::uint32_t l = 0; l < layers; ++l) {
        const std::size_t rows = r.count(0), lanes = r.count(0);
        if (lanes != 0 && rows > r.remaining() / 4 / lanes) r.fail("state array exceeds remaining data");
        Tensor<S> h(Shape{rows, lanes});
        r.f32s(h.data().data(), h.numel());
        st.h.push_back(std::move(h));
    }
    return st;
}

}  // namespace detail

template <class S>
std::vector<std::uint8_t> serialize_session(const GenerationSession<S>& s) {
    binio::Writer w;
    w.bytes(kSessionMagic, 4);
    w.u32(kSessionVersion);
    w.u64(s.C);
    w.u64(s.T);
    w.u64(s.D);
    w.u64(s.key.seed);
    w.u64(s.key.stream);
    w.u8(s.options.mean_only ? 1 : 0);
    w.u8(s.options.scan == ScanMode::parallel ? 1 : 0);
    detail::write_states(w, s.partial);
    detail::write_states(w, s.decoder);
    w.f32s(s.outputs.data(), s.outputs.size());
    return std::move(w.buffer());
}

template <class S>
GenerationSession<S> deserialize_session(const std::vector<std::uint8_t>& bytes) {
    binio::Reader r(bytes.data(), bytes.size(), "generation session");
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kSessionMagic, 4) != 0) r.fail("bad magic");
    if (const auto v = r.u32(); v != kSessionVersion) r.fail("unsupported version " + std::to_string(v));
    GenerationSession<S> s;
    s.C = r.u64();
    s.T = r.u64();
    s.D = r.u64();
    if (s.C > s.T) r.fail("position exceeds target length");
    s.key.seed = r.u64();
    s.key.stream = r.u64();
    s.options.mean_only = r.u8() != 0;
    s.options.scan = r.u8() != 0 ? ScanMode::parallel : ScanMode::sequential;
    s.partial = detail::read_states<S>(r);
    s.decoder = detail::read_states<S>(r);
    if (s.D == 0 || r.remaining() != s.C * s.D * 4) r.fail("committed outputs do not match C x D");
    s.outputs.resize(s.C * s.D);
    r.f32s(s.outputs.data(), s.outputs.size());
    if (s.partial.t != s.C || s.decoder.t != s.C) r.fail("layer states do not match the committed position");
    return s;
}

// --- Sequential SSM baseline -----------------------------------------------------

/// Autoregressive stacked SSM predicting the mean of x_{t+1} from x_1..t.
/// Inputs carry one extra channel that flags the start token.
struct BaselineHyper {
    std::size_t T = 28, D = 28;
    double sigma = 0.1;
    std::size_t width = 128, state = 8, hidden = 128, layers = 2;

    void validate() const {
        require(sigma > 0, "BaselineHyper: sigma must be positive");
        require(T >= 1 && D >= 1 && width > 0 && state > 0 && hidden > 0 && layers > 0,
                "BaselineHyper: dimensions must be positive");
    }
    StackConfig config() const { return {D + 1, width, state, hidden, layers, D}; }
    friend bool operator==(const BaselineHyper&, const BaselineHyper&) = default;
};

inline constexpr const char* kBaselinePrefix = "base.";

template <class S>
struct SsmBaseline {
    BaselineHyper hyper;
    ParamStore<S> params;

    static SsmBaseline init(const BaselineHyper& h, std::uint64_t seed) {
        h.validate();
        SsmBaseline b{h, {}};
        init_stack(b.params, kBaselinePrefix, h.config(), CounterRng(seed).child(4));
        return b;
    }
};

/// Teacher-forcing inputs [B, T, D + 1]: position 1 is the start token, position t reads x_{t-1}.
template <class S>
Tensor<S> baseline_inputs(const Tensor<S>& x) {
    require(x.rank() == 3, "baseline_inputs: x must be [B, T, D]");
    const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
    Tensor<S> u(Shape{B, T, D + 1});
    for (std::size_t b = 0; b < B; ++b) {
        u[(b * T) * (D + 1) + D] = S(1);
        for (std::size_t t = 1; t < T; ++t)
            std::copy_n(x.data().data() + (b * T + t - 1) * D, D, u.data().data() + (b * T + t) * (D + 1));
    }
    return u;
}

/// Per-item sum_t log N(x_t | w_t, sigma^2) with w_t predicted from x_1..t-1: [B].
template <class S>
Var<S> baseline_log_lik(const Binding<S>& p, const BaselineHyper& h, const Tensor<S>& x, ScanMode mode) {
    Tape<S>& tape = *p(std::string(kBaselinePrefix) + "embed.w").tape();
    auto y = stacked_forward(p, kBaselinePrefix, h.config(), tape.constant(baseline_inputs(x)), nullptr, mode).y;
    return gaussian_log_lik(tape.constant(x), y, h.sigma);
}

/// Exact log p(x_{C+1..T} | x_1..C) of one sequence [T, D]; C = 0 gives log p(x).
template <class S>
double baseline_partial_log_lik(const SsmBaseline<S>& b, const Tensor<S>& x, std::size_t C,
                                ScanMode mode = ScanMode::sequential) {
    const BaselineHyper& h = b.hyper;
    require(x.rank() == 2 && x.dim(1) == h.D, "baseline_partial_log_lik: x must be [T, " + std::to_string(h.D) + "]");
    const std::size_t T = x.dim(0);
    if (C >= T) throw UsageError("baseline_partial_log_lik: requires C < T");
    Tape<S> tape(false);
    Binding<S> p(tape, b.params, false);
    const Tensor<S> x3 = x.reshaped(Shape{1, T, h.D});
    const Tensor<S> y = stacked_forward(p, kBaselinePrefix, h.config(), tape.constant(baseline_inputs(x3)), nullptr, mode).y.value();
    return gaussian_log_prob<S>(x.data().subspan(C * h.D), y.data().subspan(C * h.D), h.sigma);
}

/// Algorithm: the prompt is consumed in one pass, then T - C single steps,
/// each producing the next mean and one Gaussian draw.
template <class S>
Tensor<S> sample_ssm_baseline(const SsmBaseline<S>& b, const Tensor<S>& prompt, std::size_t T, const CounterRng& rng,
                              SampleOptions opt = {}) {
    const BaselineHyper& h = b.hyper;
    const std::size_t C = detail::prompt_length(prompt, h.D);
    if (C >= T) throw UsageError("sample_ssm_baseline: requires C < T (C=" + std::to_string(C) + ", T=" + std::to_string(T) + ")");
    const StackConfig cfg = h.config();
    Tensor<S> out(Shape{T, h.D});
    std::copy_n(prompt.data().data(), C * h.D, out.data().data());

    LayerStates<S> states = LayerStates<S>::zeros(cfg, 1);
    if (C > 0) {
        // inputs for positions 1..C: start token, x_1..x_{C-1}
        Tape<S> tape(false);
        Binding<S> p(tape, b.params, false);
        Tensor<S> x(Shape{1, C, h.D}, std::vector<S>(prompt.data().begin(), prompt.data().begin() + C * h.D));
        states = stacked_forward(p, kBaselinePrefix, cfg, tape.constant(baseline_inputs(x)), nullptr, opt.scan).final;
    }
    Tensor<S> u(Shape{1, 1, h.D + 1});
    for (std::size_t t = C; t < T; ++t) {
        Tape<S> tape(false);
        Binding<S> p(tape, b.params, false);
        std::fill(u.data().begin(), u.data().end(), S(0));
        if (t == 0)
            u[h.D] = S(1);
        else
            std::copy_n(out.data().data() + (t - 1) * h.D, h.D, u.data().data());
        auto step = stacked_step(p, kBaselinePrefix, cfg, tape.constant(u), states);
        detail::emit_outputs(step.y.value(), t, h.D, h.sigma, opt.mean_only, rng, out.data().data() + t * h.D);
        states = std::move(step.final);
    }
    return out;
}

}  // namespace vssm
