#pragma once

// Command-line surface: stylize, bench, gradcheck, ablate, train-toy.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "strwkv/bench.hpp"
#include "strwkv/io.hpp"
#include "strwkv/losses.hpp"
#include "strwkv/train.hpp"

namespace strwkv {

namespace cli_detail {

inline std::vector<int64_t> parse_int_list(const std::string& csv) {
    std::vector<int64_t> out;
    std::istringstream is(csv);
    std::string tok;
    while (std::getline(is, tok, ','))
        if (!tok.empty()) out.push_back(std::stoll(tok));
    return out;
}

inline std::vector<std::string> parse_str_list(const std::string& csv) {
    std::vector<std::string> out;
    std::istringstream is(csv);
    std::string tok;
    while (std::getline(is, tok, ','))
        if (!tok.empty()) out.push_back(tok);
    return out;
}

// --------------------------------------------------------------------------
// gradcheck battery: compact finite-difference checks per module

struct CheckOutcome {
    int run = 0, failed = 0;
};

inline double fd_rel_err(const std::function<double(const Tensord&)>& f, const Tensord& x0,
                         const Tensord& analytic, double h = 1e-5) {
    double worst = 0;
    Tensord x = x0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        const double num = (fp - fm) / (2 * h);
        worst = std::max(worst, std::abs(analytic[i] - num) /
                                    std::max(std::abs(analytic[i]) + std::abs(num), 1e-3));
    }
    return worst;
}

inline void report(CheckOutcome& out, const std::string& name, double err, double tol = 1e-4) {
    ++out.run;
    if (err < tol) {
        std::printf("ok   %-28s max rel err %.3g\n", name.c_str(), err);
    } else {
        ++out.failed;
        std::printf("FAIL %-28s max rel err %.3g (tol %.1g)\n", name.c_str(), err, tol);
    }
}

inline void gradcheck_tensor(CheckOutcome& out, Rng& rng) {
    Tensord a0 = rng.uniform_tensor({3, 4}, -1, 1);
    Tensord w0 = rng.uniform_tensor({4, 2}, -1, 1);
    {
        Tape t;
        Var a = t.leaf(a0, true);
        t.backward(t.sum(t.sigmoid(t.matmul(a, t.leaf(w0, false)))));
        report(out, "tensor.matmul",
               fd_rel_err(
                   [&](const Tensord& x) {
                       Tape tt;
                       return tt.value(tt.sum(tt.sigmoid(tt.matmul(tt.leaf(x), tt.leaf(w0)))))[0];
                   },
                   a0, t.grad(a)));
    }
    Tensord x0 = rng.uniform_tensor({2, 4, 4}, -1, 1);
    Tensord cw = rng.uniform_tensor({2, 2, 3, 3}, -1, 1);
    {
        Tape t;
        Var w = t.leaf(cw, true);
        t.backward(t.sum(t.conv2d(t.leaf(x0, false), w, Var{}, 1, 1)));
        report(out, "tensor.conv2d",
               fd_rel_err(
                   [&](const Tensord& wv) {
                       Tape tt;
                       return tt.value(tt.sum(tt.conv2d(tt.leaf(x0), tt.leaf(wv), Var{}, 1, 1)))[0];
                   },
                   cw, t.grad(w)));
    }
    Tensord g0 = rng.uniform_tensor({4}, 0.5, 1.5);
    Tensord b0 = rng.uniform_tensor({4}, -0.5, 0.5);
    Tensord s0 = rng.uniform_tensor({5, 4}, -1, 1);
    {
        Tape t;
        Var x = t.leaf(s0, true);
        t.backward(t.sum(t.layer_norm(x, t.leaf(g0, false), t.leaf(b0, false), 1e-5)));
        report(out, "tensor.layer_norm",
               fd_rel_err(
                   [&](const Tensord& xv) {
                       Tape tt;
                       return tt.value(
                           tt.sum(tt.layer_norm(tt.leaf(xv), tt.leaf(g0), tt.leaf(b0), 1e-5)))[0];
                   },
                   s0, t.grad(x)));
    }
}

inline void gradcheck_wkv(CheckOutcome& out, Rng& rng) {
    ensure_builtin_customs();
    const int64_t T = 9, C = 2;
    Tensord k0 = rng.uniform_tensor({T, C}, -1, 1);
    Tensord v0 = rng.uniform_tensor({T, C}, -1.5, 1.5);
    Tensord w0 = rng.uniform_tensor({C}, 0.1, 1.5);
    Tensord u0 = rng.uniform_tensor({C}, -1, 1);
    Tensord gy = rng.uniform_tensor({T, C}, -1, 1);
    BiWkvGrads g = bi_wkv_backward(WkvSequence{k0, v0}, WkvParams{w0, u0}, gy);
    auto probe_loss = [&](const Tensord& y) {
        double acc = 0;
        for (int64_t i = 0; i < y.numel(); ++i) acc += gy[i] * y[i];
        return acc;
    };
    report(out, "wkv.backward_dk",
           fd_rel_err(
               [&](const Tensord& kv) {
                   return probe_loss(bi_wkv_scan(WkvSequence{kv, v0}, WkvParams{w0, u0}));
               },
               k0, g.dk));
    report(out, "wkv.backward_dv",
           fd_rel_err(
               [&](const Tensord& vv) {
                   return probe_loss(bi_wkv_scan(WkvSequence{k0, vv}, WkvParams{w0, u0}));
               },
               v0, g.dv));
    report(out, "wkv.backward_dw",
           fd_rel_err(
               [&](const Tensord& wv) {
                   return probe_loss(bi_wkv_scan(WkvSequence{k0, v0}, WkvParams{wv, u0}));
               },
               w0, g.dw));
    report(out, "wkv.backward_du",
           fd_rel_err(
               [&](const Tensord& uv) {
                   return probe_loss(bi_wkv_scan(WkvSequence{k0, v0}, WkvParams{w0, uv}));
               },
               u0, g.du));
}

inline void gradcheck_shift(CheckOutcome& out, Rng& rng) {
    ensure_builtin_customs();
    Tensord x0 = rng.uniform_tensor({1, 4, 4}, -1, 1);
    DeformShiftParams p = make_deform_params(1);
    p.predictor_w = rng.uniform_tensor({18, 1, 3, 3}, -0.005, 0.005);
    p.predictor_b = rng.uniform_tensor({18}, 0.15, 0.35);
    p.depthwise = rng.uniform_tensor({1, 3, 3}, -1, 1);
    Tensord probe = rng.uniform_tensor({1, 4, 4}, -1, 1);
    DeformShiftGrads g = deform_shift_backward(x0, p, probe);
    auto probe_loss = [&](const Tensord& y) {
        double acc = 0;
        for (int64_t i = 0; i < y.numel(); ++i) acc += probe[i] * y[i];
        return acc;
    };
    report(out, "shift.deform_dx",
           fd_rel_err([&](const Tensord& xv) { return probe_loss(deform_shift(xv, p)); }, x0,
                      g.dx));
    report(out, "shift.deform_dpredictor",
           fd_rel_err(
               [&](const Tensord& pw) {
                   auto q = p;
                   q.predictor_w = pw;
                   return probe_loss(deform_shift(x0, q));
               },
               p.predictor_w, g.dpredictor_w));
    report(out, "shift.deform_dkernel",
           fd_rel_err(
               [&](const Tensord& kd) {
                   auto q = p;
                   q.depthwise = kd;
                   return probe_loss(deform_shift(x0, q));
               },
               p.depthwise, g.ddepthwise));
}

inline void gradcheck_block(CheckOutcome& out, Rng& rng) {
    const int64_t C = 4, H = 4, W = 4;
    BlockWeights blk = make_block(C, 4, ShiftVariant::deform, rng);
    ParamRegistry reg;
    register_block(reg, blk, "blk");
    for (size_t i = 0; i < reg.size(); ++i) {
        Param& p = reg.param(i);
        if (p.value.ndim() == 1 && p.value.numel() == kOffsetChannels)
            p.value = rng.uniform_tensor({kOffsetChannels}, 0.15, 0.35);
        if (p.value.ndim() == 4 && p.value.dim(0) == kOffsetChannels)
            p.value = rng.uniform_tensor(p.value.shape(), -0.002, 0.002);
    }
    Tensord x0 = rng.uniform_tensor({C, H, W}, -1, 1);
    Tensord probe = rng.uniform_tensor({C, H, W}, -1, 1);
    ScanPlan plan = make_scan_plan(ScanVariant::skip, H, W, 2);

    Tape t;
    Binding b = bind(t, reg, true);
    Var y = block_forward(t, b, blk, t.leaf(x0, false), plan, 2);
    t.backward(t.sum(t.mul(y, t.leaf(probe, false))));

    double worst = 0;
    for (size_t pi = 0; pi < reg.size(); pi += 5) {
        Param& p = reg.param(pi);
        const Tensord analytic = t.grad(b.vars[static_cast<size_t>(p.idx)]);
        const double orig = p.value[0];
        const double h = 1e-5;
        auto eval = [&]() {
            Tape tt;
            Binding bb = bind(tt, reg, false);
            Var yy = block_forward(tt, bb, blk, tt.leaf(x0, false), plan, 2);
            return tt.value(tt.sum(tt.mul(yy, tt.leaf(probe, false))))[0];
        };
        p.value[0] = orig + h;
        const double fp = eval();
        p.value[0] = orig - h;
        const double fm = eval();
        p.value[0] = orig;
        const double num = (fp - fm) / (2 * h);
        worst = std::max(worst, std::abs(analytic[0] - num) /
                                    std::max(std::abs(analytic[0]) + std::abs(num), 1e-3));
    }
    report(out, "block.parameter_slice", worst, 1e-3);
}

inline void gradcheck_losses(CheckOutcome& out, Rng& rng) {
    TinyFeatureNet fe;
    Tensord io0 = make_synthetic_image(8, 8, rng.next_u64());
    Tensord ic = make_synthetic_image(8, 8, rng.next_u64());
    Tensord is = make_synthetic_image(8, 8, rng.next_u64());
    auto eval = [&](const Tensord& io) {
        Tape t;
        Var vio = t.leaf(io, false), vic = t.leaf(ic, false), vis = t.leaf(is, false);
        Var lc = content_loss(t, vio, vic, fe);
        Var ls = style_loss(t, vio, vis, fe);
        auto [id1, id2] = identity_losses(t, vio, vic, vis, vis, fe);
        return t.value(total_loss(t, lc, ls, id1, id2, {}))[0];
    };
    Tape t;
    Var vio = t.leaf(io0, true), vic = t.leaf(ic, false), vis = t.leaf(is, false);
    Var lc = content_loss(t, vio, vic, fe);
    Var ls = style_loss(t, vio, vis, fe);
    auto [id1, id2] = identity_losses(t, vio, vic, vis, vis, fe);
    t.backward(total_loss(t, lc, ls, id1, id2, {}));
    report(out, "losses.total_wrt_image", fd_rel_err(eval, io0, t.grad(vio)));
}

// --------------------------------------------------------------------------
// subcommand bodies

inline int run_stylize(const std::string& content_path, const std::string& style_path,
                       const std::string& weights_path, const std::string& out_path, int q_opt,
                       int p_opt, const std::string& shift_opt, const std::string& scan_opt) {
    CheckpointData data = read_checkpoint(weights_path);
    ModelConfig cfg = data.config;
    if (q_opt > 0) cfg.q = q_opt;
    if (p_opt > 0) cfg.p = p_opt;
    if (!scan_opt.empty()) cfg.scan = scan_variant_from_string(scan_opt);
    if (!shift_opt.empty()) cfg.shift = shift_variant_from_string(shift_opt);
    StyleRwkvModel model(cfg);
    fill_model_from(data, model);

    Tensord content = load_ppm(content_path);
    Tensord style = load_ppm(style_path);
    Tensord out = model.stylize(content, style);
    save_ppm(out, out_path);
    std::printf("stylized %lldx%lld image -> %s\n", static_cast<long long>(out.dim(2)),
                static_cast<long long>(out.dim(1)), out_path.c_str());
    return 0;
}

inline int run_bench(const std::string& kernels_csv, const std::string& lengths_csv, int64_t C,
                     int q, int repeats, const std::string& out_path) {
    const auto friendly = parse_str_list(kernels_csv);
    std::vector<int64_t> lengths = parse_int_list(lengths_csv);
    for (size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1])
            throw std::invalid_argument("bench: lengths must be ascending");
    std::vector<BenchRecord> records;
    for (const auto& f : friendly) {
        std::string kernel;
        if (f == "scan" || f == "bi_wkv_scan") kernel = "bi_wkv_scan";
        else if (f == "naive" || f == "bi_wkv_naive") kernel = "bi_wkv_naive";
        else if (f == "re_wkv") kernel = "re_wkv";
        else if (f == "quadratic" || f == "quadratic_attention_reference")
            kernel = "quadratic_attention_reference";
        else if (f == "model" || f == "model_forward") kernel = "model_forward";
        else throw std::invalid_argument("bench: unknown kernel " + f);
        for (int64_t T : lengths) {
            BenchRecord rec = kernel == "model_forward" ? bench_model_forward(T, repeats)
                                                        : bench_kernel(kernel, T, C, q, repeats);
            std::printf("%-30s T=%-7lld wall=%.3f ms  flops=%lld\n", rec.kernel.c_str(),
                        static_cast<long long>(rec.T), rec.wall_ns / 1e6,
                        static_cast<long long>(rec.flops));
            records.push_back(std::move(rec));
        }
    }
    std::ofstream os(out_path);
    if (!os) throw std::runtime_error("bench: cannot open " + out_path);
    write_bench_csv(records, os);
    std::printf("wrote %zu rows to %s\n", records.size(), out_path.c_str());
    return 0;
}

inline int run_gradcheck(const std::string& module, uint64_t seed) {
    Rng rng(seed);
    CheckOutcome out;
    const bool all = module.empty();
    if (all || module == "tensor") gradcheck_tensor(out, rng);
    if (all || module == "wkv") gradcheck_wkv(out, rng);
    if (all || module == "shift") gradcheck_shift(out, rng);
    if (all || module == "block") gradcheck_block(out, rng);
    if (all || module == "losses") gradcheck_losses(out, rng);
    if (out.run == 0) throw std::invalid_argument("gradcheck: unknown module " + module);
    std::printf("gradcheck: %d checks, %d failed\n", out.run, out.failed);
    return out.failed == 0 ? 0 : 1;
}

inline int run_ablate(const std::string& axis, const std::string& out_path, int64_t size,
                      uint64_t seed, const std::string& features, int64_t width,
                      const std::string& blocks_csv) {
    ModelConfig base;
    base.base_width = width;
    if (!blocks_csv.empty()) {
        auto b = parse_int_list(blocks_csv);
        if (b.size() != 4) throw std::invalid_argument("ablate: --blocks needs 4 counts");
        for (size_t i = 0; i < 4; ++i) base.blocks[i] = static_cast<int>(b[i]);
    }
    base.init_seed = seed;

    std::vector<std::pair<std::string, ModelConfig>> variants;
    if (axis == "shift") {
        for (auto v : {ShiftVariant::quad, ShiftVariant::omni, ShiftVariant::deform}) {
            ModelConfig cfg = base;
            cfg.shift = v;
            variants.emplace_back(to_string(v), cfg);
        }
    } else if (axis == "scan") {
        for (auto v : {ScanVariant::bidirectional, ScanVariant::zigzag}) {
            ModelConfig cfg = base;
            cfg.scan = v;
            variants.emplace_back(to_string(v), cfg);
        }
        for (int p : {1, 2, 3}) {
            ModelConfig cfg = base;
            cfg.scan = ScanVariant::skip;
            cfg.p = p;
            variants.emplace_back("skip_p" + std::to_string(p), cfg);
        }
    } else if (axis == "q") {
        for (int q : {1, 2, 3}) {
            ModelConfig cfg = base;
            cfg.q = q;
            variants.emplace_back("q" + std::to_string(q), cfg);
        }
    } else {
        throw std::invalid_argument("ablate: axis must be shift, scan or q");
    }

    Tensord content = make_synthetic_image(size, size, seed);
    Tensord style = make_synthetic_image(size, size, seed + 1);
    auto fe = make_feature_extractor(features);

    std::ofstream os(out_path);
    if (!os) throw std::runtime_error("ablate: cannot open " + out_path);
    os << "axis,variant,content_loss,style_loss,id1_loss,id2_loss,total_loss,wall_ms\n";
    for (const auto& [label, cfg] : variants) {
        StyleRwkvModel model(cfg);
        const auto t0 = std::chrono::steady_clock::now();
        Tensord io = model.stylize(content, style);
        Tensord icc = model.stylize(content, content);
        Tensord iss = model.stylize(style, style);
        const auto t1 = std::chrono::steady_clock::now();
        const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        LossReport rep = compute_losses(io, content, style, icc, iss, *fe);
        os << axis << ',' << label << ',' << std::setprecision(10) << rep.content << ','
           << rep.style << ',' << rep.id1 << ',' << rep.id2 << ',' << rep.total << ','
           << std::setprecision(6) << ms << '\n';
        std::printf("%-6s %-14s total=%.4f  (%.0f ms)\n", axis.c_str(), label.c_str(), rep.total,
                    ms);
    }
    std::printf("wrote %zu variants to %s\n", variants.size(), out_path.c_str());
    return 0;
}

inline int run_train_toy(const std::string& content_path, const std::string& style_path,
                         int steps, uint64_t seed, int64_t size, double lr,
                         const std::string& features, const std::string& curve_path,
                         const std::string& weights_path) {
    Tensord content =
        content_path.empty() ? make_synthetic_image(size, size, seed) : load_ppm(content_path);
    Tensord style =
        style_path.empty() ? make_synthetic_image(size, size, seed + 1) : load_ppm(style_path);
    content = pad_reflect(content).first;
    style = pad_reflect(style).first;

    ModelConfig cfg = tiny_config();
    cfg.init_seed = seed;
    StyleRwkvModel model(cfg);
    auto fe = make_feature_extractor(features);
    TrainResult res = train_toy(model, content, style, steps, *fe, {}, lr);

    std::ofstream os(curve_path);
    if (!os) throw std::runtime_error("train-toy: cannot open " + curve_path);
    os << "step,total,content,style,id1,id2\n";
    os << std::setprecision(17);
    for (size_t i = 0; i < res.curve.size(); ++i)
        os << i << ',' << res.reports[i].total << ',' << res.reports[i].content << ','
           << res.reports[i].style << ',' << res.reports[i].id1 << ',' << res.reports[i].id2
           << '\n';
    save_weights(model, weights_path);
    std::printf("train-toy: initial %.4f -> final %.4f over %d steps (curve %s, weights %s)\n",
                res.curve.front(), res.curve.back(), steps, curve_path.c_str(),
                weights_path.c_str());
    return 0;
}

}  // namespace cli_detail

inline int cli_main(int argc, char** argv) {
    CLI::App app{"StyleRWKV kernels, toy model and benchmarks"};
    app.require_subcommand(1);

    auto* sty = app.add_subcommand("stylize", "Run the model on a content/style image pair");
    std::string sty_content, sty_style, sty_weights, sty_out, sty_shift, sty_scan;
    int sty_q = 0, sty_p = 0;
    sty->add_option("--content", sty_content)->required();
    sty->add_option("--style", sty_style)->required();
    sty->add_option("--weights", sty_weights)->required();
    sty->add_option("--out", sty_out)->required();
    sty->add_option("--q", sty_q, "override recurrence count");
    sty->add_option("--p", sty_p, "override skip step");
    sty->add_option("--shift", sty_shift)->check(CLI::IsMember({"uni", "quad", "omni", "deform"}));
    sty->add_option("--scan", sty_scan)->check(CLI::IsMember({"skip", "bidirectional", "zigzag"}));

    auto* ben = app.add_subcommand("bench", "Time kernels across sequence lengths");
    std::string ben_kernels = "scan,naive,re_wkv";
    std::string ben_lengths = "1024,2048,4096,8192,16384";
    std::string ben_out = "bench.csv";
    int64_t ben_channels = 16;
    int ben_q = 2, ben_repeats = 5;
    ben->add_option("--kernels", ben_kernels, "comma list: scan,naive,re_wkv,quadratic,model");
    ben->add_option("--lengths", ben_lengths, "comma list of ascending T");
    ben->add_option("--channels", ben_channels);
    ben->add_option("--q", ben_q);
    ben->add_option("--repeats", ben_repeats);
    ben->add_option("--out", ben_out);

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    std::string gc_module;
    uint64_t gc_seed = 7;
    gc->add_option("--module", gc_module)
        ->check(CLI::IsMember({"tensor", "wkv", "shift", "block", "losses"}));
    gc->add_option("--seed", gc_seed);

    auto* abl = app.add_subcommand("ablate", "Run a variant axis on fixed inputs, emit CSV");
    std::string abl_axis, abl_out = "ablate.csv", abl_features = "tiny", abl_blocks;
    int64_t abl_size = 64, abl_width = 48;
    uint64_t abl_seed = 91;
    abl->add_option("--axis", abl_axis)->required()->check(CLI::IsMember({"shift", "scan", "q"}));
    abl->add_option("--out", abl_out);
    abl->add_option("--size", abl_size);
    abl->add_option("--seed", abl_seed);
    abl->add_option("--features", abl_features)->check(CLI::IsMember({"tiny", "identity"}));
    abl->add_option("--width", abl_width, "model base width");
    abl->add_option("--blocks", abl_blocks, "comma list of 4 block counts");

    auto* toy = app.add_subcommand("train-toy", "Optimize the toy model on one pair");
    std::string toy_content, toy_style, toy_features = "tiny";
    std::string toy_curve = "curve.csv", toy_weights = "toy.strwkv";
    int toy_steps = 200;
    int64_t toy_size = 32;
    uint64_t toy_seed = 2024;
    double toy_lr = kToyLearningRate;
    toy->add_option("--content", toy_content, "content PPM (synthetic if omitted)");
    toy->add_option("--style", toy_style, "style PPM (synthetic if omitted)");
    toy->add_option("--steps", toy_steps);
    toy->add_option("--seed", toy_seed);
    toy->add_option("--size", toy_size, "synthetic image side");
    toy->add_option("--lr", toy_lr);
    toy->add_option("--features", toy_features)->check(CLI::IsMember({"tiny", "identity"}));
    toy->add_option("--out-curve", toy_curve);
    toy->add_option("--out-weights", toy_weights);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (sty->parsed())
            return cli_detail::run_stylize(sty_content, sty_style, sty_weights, sty_out, sty_q,
                                           sty_p, sty_shift, sty_scan);
        if (ben->parsed())
            return cli_detail::run_bench(ben_kernels, ben_lengths, ben_channels, ben_q,
                                         ben_repeats, ben_out);
        if (gc->parsed()) return cli_detail::run_gradcheck(gc_module, gc_seed);
        if (abl->parsed())
            return cli_detail::run_ablate(abl_axis, abl_out, abl_size, abl_seed, abl_features,
                                          abl_width, abl_blocks);
        if (toy->parsed())
            return cli_detail::run_train_toy(toy_content, toy_style, toy_steps, toy_seed, toy_size,
                                             toy_lr, toy_features, toy_curve, toy_weights);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}

// Test-friendly wrapper.
inline int cli_run(std::vector<std::string> args) {
    std::vector<char*> argv;
    std::string prog = "strwkv";
    argv.push_back(prog.data());
    for (auto& a : args) argv.push_back(a.data());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace strwkv
