#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "iwgt/model.hpp"
#include "iwgt/optim.hpp"

using namespace iwgt;
namespace fs = std::filesystem;

namespace {

InterferenceGraph toy_graph(std::size_t K, std::uint64_t seed) {
    ScenarioConfig sc;
    sc.K = K;
    sc.region_side_m = 300;
    const auto snap = sample_snapshot(sc, seed);
    std::vector<ChannelSnapshot> one{snap};
    return build_graph(snap, compute_norm_stats(one), noise_power(sc));
}

void zero_param(ParameterSet& ps, const std::string& name) {
    auto& d = ps.value(name).data;
    std::fill(d.begin(), d.end(), 0.0);
}

Tensor eval(ParameterSet& ps, const std::function<ad::Var(Binder&)>& f) {
    ad::Graph g;
    Binder b(g, ps);
    return f(b).value();
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "iwgt_test_model" / name;
    fs::remove_all(p);
    return p;
}

} // namespace

TEST(Encoder, ZeroWeightsGiveZero) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 1);
    for (const char* n : {"backbone.enc.w1", "backbone.enc.b1", "backbone.enc.w2", "backbone.enc.b2"}) zero_param(ps, n);
    const auto Z = eval(ps, [&](Binder& b) { return encode_nodes(b, cfg, toy_graph(5, 1)); });
    for (double v : Z.data) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, SingleNodeShape) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 1);
    const auto Z = eval(ps, [&](Binder& b) { return encode_nodes(b, cfg, toy_graph(1, 2)); });
    EXPECT_EQ(Z.shape, (Shape{1, cfg.d_model}));
}

TEST(Encoder, RowWise) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 1);
    const auto g = toy_graph(4, 3);
    auto gp = g;
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    for (std::size_t i = 0; i < 4; ++i) gp.node_feat[i] = g.node_feat[perm[i]];
    const auto Z = eval(ps, [&](Binder& b) { return encode_nodes(b, cfg, g); });
    const auto Zp = eval(ps, [&](Binder& b) { return encode_nodes(b, cfg, gp); });
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < cfg.d_model; ++c) EXPECT_EQ(Zp.at(i, c), Z.at(perm[i], c));
}

TEST(BiasProjector, ZeroWeightsGiveConstantBias) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 2);
    zero_param(ps, "backbone.bias.w2");
    ps.value("backbone.bias.b2").data = {0.1, -0.2, 0.3, 0.4};
    ps.value("backbone.self_bias").data = {1, 2, 3, 4};
    const auto g = toy_graph(4, 1);
    ad::Graph gr;
    Binder b(gr, ps);
    const auto B = bias_project(b, cfg, g, MaskView::none(4)).to_tensor();
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t j = 0; j < 4; ++j)
            for (std::size_t m = 0; m < 4; ++m)
                EXPECT_EQ(B.data[(k * 4 + j) * 4 + m], k == j ? 1.0 + m : ps.value("backbone.bias.b2").data[m]);
}

TEST(BiasProjector, FullMaskMakesOffDiagonalIdentical) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 3);
    const auto g = toy_graph(5, 2);
    ad::Graph gr;
    Binder b(gr, ps);
    const auto B = bias_project(b, cfg, g, mask_edges(5, 1.0, 0)).to_tensor();
    for (std::size_t m = 0; m < 4; ++m)
        for (std::size_t k = 0; k < 5; ++k)
            for (std::size_t j = 0; j < 5; ++j)
                if (k != j) {
                    EXPECT_EQ(B.data[(k * 5 + j) * 4 + m], B.data[(0 * 5 + 1) * 4 + m]);
                }
}

TEST(BiasProjector, MaskingChangesBias) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 4);
    const auto g = toy_graph(4, 3);
    ad::Graph gr;
    Binder b(gr, ps);
    const auto B0 = bias_project(b, cfg, g, mask_edges(4, 0.0, 0)).to_tensor();
    const auto B1 = bias_project(b, cfg, g, mask_edges(4, 1.0, 0)).to_tensor();
    EXPECT_NE(B0, B1);
}

TEST(BiasProjector, SensitiveToEachUnmaskedEdge) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 5);
    const auto g = toy_graph(4, 4);
    ad::Graph gr;
    Binder b(gr, ps);
    const auto B = bias_project(b, cfg, g, MaskView::none(4)).to_tensor();
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t j = 0; j < 4; ++j) {
            if (k == j) continue;
            auto g2 = g;
            g2.edge_feat[(k * 4 + j) * 2] += 0.5;
            const auto B2 = bias_project(b, cfg, g2, MaskView::none(4)).to_tensor();
            double diff = 0;
            for (std::size_t m = 0; m < 4; ++m) diff += std::abs(B2.data[(k * 4 + j) * 4 + m] - B.data[(k * 4 + j) * 4 + m]);
            EXPECT_GT(diff, 0.0) << k << "," << j;
            // Other entries are untouched.
            for (std::size_t i = 0; i < 16; ++i)
                if (i != k * 4 + j) {
                    for (std::size_t m = 0; m < 4; ++m) EXPECT_EQ(B2.data[i * 4 + m], B.data[i * 4 + m]);
                }
        }
}

TEST(Attention, SingleNodeAttendsToItself) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 6);
    const auto g = toy_graph(1, 5);
    ad::Graph gr;
    Binder b(gr, ps);
    const auto Z = encode_nodes(b, cfg, g);
    const auto bias = bias_project(b, cfg, g, MaskView::none(1));
    const auto out = attention_layer(b, cfg, 0, Z, bias).value();
    // Oracle: attention over one node returns its own value row.
    auto x = ad::layer_norm(ad::add(Z, ad::matmul(ad::matmul(Z, b("backbone.layer0.wv")), b("backbone.layer0.wo"))),
                            b("backbone.layer0.ln1.gamma"), b("backbone.layer0.ln1.beta"));
    auto f = affine(b, ad::relu(affine(b, x, "backbone.layer0.ffn.w1", "backbone.layer0.ffn.b1")), "backbone.layer0.ffn.w2",
                    "backbone.layer0.ffn.b2");
    const auto expect = ad::layer_norm(ad::add(x, f), b("backbone.layer0.ln2.gamma"), b("backbone.layer0.ln2.beta")).value();
    for (std::size_t c = 0; c < cfg.d_model; ++c) EXPECT_NEAR(out.data[c], expect.data[c], 1e-12);
}

TEST(Attention, IdenticalNodesGiveIdenticalRows) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 7);
    ad::Graph gr;
    Binder b(gr, ps);
    Tensor row(Shape{1, cfg.d_model});
    for (std::size_t c = 0; c < cfg.d_model; ++c) row.data[c] = std::sin(static_cast<double>(c));
    Tensor Zt(Shape{5, cfg.d_model});
    for (std::size_t k = 0; k < 5; ++k) std::copy(row.data.begin(), row.data.end(), Zt.data.begin() + k * cfg.d_model);
    AttentionBias bias{5, {}};
    for (std::size_t m = 0; m < cfg.M; ++m) bias.heads.push_back(gr.constant(Tensor(Shape{5, 5}, 0.7)));
    const auto out = attention_layer(b, cfg, 0, gr.constant(Zt), bias).value();
    for (std::size_t k = 1; k < 5; ++k)
        for (std::size_t c = 0; c < cfg.d_model; ++c) EXPECT_NEAR(out.at(k, c), out.at(0, c), 1e-14);
}

TEST(Attention, PermutationEquivariant) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 8);
    const std::size_t K = 6;
    Rng rng(3);
    std::normal_distribution<double> n(0, 1);
    Tensor Zt(Shape{K, cfg.d_model});
    for (auto& x : Zt.data) x = n(rng);
    std::vector<Tensor> Bt;
    for (std::size_t m = 0; m < cfg.M; ++m) {
        Tensor t(Shape{K, K});
        for (auto& x : t.data) x = n(rng);
        Bt.push_back(t);
    }
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::size_t> perm(K);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Tensor Zp(Shape{K, cfg.d_model});
        for (std::size_t i = 0; i < K; ++i)
            for (std::size_t c = 0; c < cfg.d_model; ++c) Zp.at(i, c) = Zt.at(perm[i], c);
        ad::Graph gr;
        Binder b(gr, ps);
        AttentionBias bias{K, {}}, biasp{K, {}};
        for (std::size_t m = 0; m < cfg.M; ++m) {
            Tensor tp(Shape{K, K});
            for (std::size_t i = 0; i < K; ++i)
                for (std::size_t j = 0; j < K; ++j) tp.at(i, j) = Bt[m].at(perm[i], perm[j]);
            bias.heads.push_back(gr.constant(Bt[m]));
            biasp.heads.push_back(gr.constant(tp));
        }
        const auto out = attention_layer(b, cfg, 0, gr.constant(Zt), bias).value();
        const auto outp = attention_layer(b, cfg, 0, gr.constant(Zp), biasp).value();
        for (std::size_t i = 0; i < K; ++i)
            for (std::size_t c = 0; c < cfg.d_model; ++c) EXPECT_NEAR(outp.at(i, c), out.at(perm[i], c), 1e-10);
    }
}

TEST(Backbone, ZeroLayersIsEncoder) {
    ModelConfig cfg;
    cfg.L = 0;
    auto ps = init_params(cfg, 9);
    EXPECT_FALSE(ps.contains("backbone.mask_token"));
    EXPECT_FALSE(ps.contains("backbone.bias.w1"));
    const auto g = toy_graph(4, 6);
    EXPECT_EQ(eval(ps, [&](Binder& b) { return backbone_forward(b, cfg, g); }),
              eval(ps, [&](Binder& b) { return encode_nodes(b, cfg, g); }));
}

TEST(Backbone, DeterministicAndEmptyMaskIsFullGraph) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 10);
    const auto g = toy_graph(5, 7);
    const auto a = eval(ps, [&](Binder& b) { return backbone_forward(b, cfg, g); });
    EXPECT_EQ(a, eval(ps, [&](Binder& b) { return backbone_forward(b, cfg, g); }));
    EXPECT_EQ(a, eval(ps, [&](Binder& b) { return backbone_forward(b, cfg, g, mask_edges(5, 0.0, 3)); }));
}

TEST(Backbone, MaskShapeMismatchRejected) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 10);
    const auto g = toy_graph(5, 7);
    EXPECT_THROW(eval(ps, [&](Binder& b) { return backbone_forward(b, cfg, g, MaskView::none(4)); }), ShapeError);
}

TEST(Decoder, ZeroFinalWeightsGiveBias) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 11);
    zero_param(ps, "decoder.w2");
    ps.value("decoder.b2").data = {0.25, -1.5};
    const auto g = toy_graph(4, 8);
    const auto out = eval(ps, [&](Binder& b) { return edge_decode(b, backbone_forward(b, cfg, g), {{0, 1}, {2, 3}, {3, 0}}); });
    for (std::size_t r = 0; r < 3; ++r) {
        EXPECT_EQ(out.at(r, 0), 0.25);
        EXPECT_EQ(out.at(r, 1), -1.5);
    }
}

TEST(Decoder, AsymmetricAndRejectsDiagonal) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 12);
    const auto g = toy_graph(4, 9);
    const auto out = eval(ps, [&](Binder& b) { return edge_decode(b, backbone_forward(b, cfg, g), {{0, 1}, {1, 0}}); });
    EXPECT_NE(out.at(0, 0), out.at(1, 0));
    EXPECT_THROW(eval(ps, [&](Binder& b) { return edge_decode(b, backbone_forward(b, cfg, g), {{2, 2}}); }), InvalidArgument);
}

TEST(Decoder, OverfitsSingleGraph) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 13, HeadSet::Decoder);
    const auto g = toy_graph(4, 10);
    const auto mask = mask_edges(4, 0.3, 1);
    const auto pairs = mask.pairs();
    Tensor target(Shape{pairs.size(), 2});
    for (std::size_t i = 0; i < pairs.size(); ++i)
        for (std::size_t f = 0; f < 2; ++f) target.at(i, f) = g.edge(pairs[i].first, pairs[i].second, f);
    AdamState st;
    double loss = 0;
    for (int step = 0; step < 500; ++step) {
        ps.zero_grad();
        ad::Graph gr;
        Binder b(gr, ps);
        const auto d = ad::sub(edge_decode(b, backbone_forward(b, cfg, g, mask), pairs), gr.constant(target));
        const auto l = ad::scale(ad::sum(ad::mul(d, d)), 1.0 / static_cast<double>(pairs.size()));
        loss = l.value().item();
        gr.backward(l);
        adam_step(ps, st, 1e-2);
    }
    EXPECT_LT(loss, 1e-3);
}

TEST(Projection, IdentityHookReturnsInput) {
    ModelConfig cfg;
    cfg.d_proj = cfg.d_model;
    cfg.d_pred_hidden = 2 * cfg.d_model;
    auto ps = init_params(cfg, 14);
    set_identity_projection(ps, cfg);
    const auto g = toy_graph(5, 11);
    const auto Z = eval(ps, [&](Binder& b) { return backbone_forward(b, cfg, g); });
    EXPECT_EQ(eval(ps, [&](Binder& b) { return project_and_predict(b, backbone_forward(b, cfg, g), Role::Student); }), Z);
    EXPECT_EQ(eval(ps, [&](Binder& b) { return project_and_predict(b, backbone_forward(b, cfg, g), Role::Teacher); }), Z);
}

TEST(Projection, TeacherIgnoresPredictor) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 15);
    const auto g = toy_graph(5, 12);
    const auto before = eval(ps, [&](Binder& b) { return project_and_predict(b, backbone_forward(b, cfg, g), Role::Teacher); });
    for (auto& x : ps.value("predictor.w1").data) x *= -3.0;
    const auto after = eval(ps, [&](Binder& b) { return project_and_predict(b, backbone_forward(b, cfg, g), Role::Teacher); });
    EXPECT_EQ(before, after);
    EXPECT_EQ(before.shape, (Shape{5, cfg.d_proj}));
    const auto student = eval(ps, [&](Binder& b) { return project_and_predict(b, backbone_forward(b, cfg, g), Role::Student); });
    EXPECT_EQ(student.shape, (Shape{5, cfg.d_proj}));
}

TEST(DecisionHead, ZeroWeightsGiveHalfPower) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 16);
    for (const char* n : {"head.w1", "head.b1", "head.w2", "head.b2"}) zero_param(ps, n);
    for (double p : infer_powers(ps, cfg, toy_graph(4, 13), 0.01)) EXPECT_EQ(p, 0.005);
}

TEST(DecisionHead, SaturatesAtMaxPower) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 17);
    zero_param(ps, "head.w2");
    ps.value("head.b2").data = {50.0};
    for (double p : infer_powers(ps, cfg, toy_graph(4, 14), 0.01)) EXPECT_NEAR(p, 0.01, 1e-12);
}

TEST(DecisionHead, BoundsOnRandomInputs) {
    ModelConfig cfg;
    auto ps = init_params(cfg, 18);
    Rng rng(5);
    std::normal_distribution<double> n(0, 30);
    for (int i = 0; i < 200; ++i) {
        Tensor Z(Shape{8, cfg.d_model});
        for (auto& x : Z.data) x = n(rng);
        ad::Graph gr;
        Binder b(gr, ps);
        for (double p : decision_head(b, gr.constant(Z), 0.01).value().data) {
            EXPECT_GE(p, 0.0);
            EXPECT_LE(p, 0.01);
        }
    }
}

TEST(Model, TeacherAndStudentAgreeWhenEqual) {
    ModelConfig cfg;
    auto student = init_params(cfg, 19);
    auto teacher = student.subset(group::teacher);
    const auto g = toy_graph(6, 15);
    EXPECT_EQ(eval(student, [&](Binder& b) { return backbone_forward(b, cfg, g); }),
              eval(teacher, [&](Binder& b) { return backbone_forward(b, cfg, g); }));
}

TEST(Model, ParamCountForZeroLayers) {
    ModelConfig cfg;
    cfg.L = 0;
    const std::size_t d = cfg.d_model, h = d / 4;
    const std::size_t expect = (1 * d + d) + (d * d + d) + (d * h + h) + (h * 1 + 1);
    EXPECT_EQ(param_count(cfg), expect);
    EXPECT_EQ(param_count(cfg), 1393u);
}

TEST(Model, ConfigValidation) {
    ModelConfig cfg;
    cfg.M = 5;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(Model, GradientCheckEveryHead) {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.M = 2;
    cfg.d_ffn = 8;
    cfg.d_proj = 4;
    cfg.d_pred_hidden = 4;
    auto ps = init_params(cfg, 20);
    const auto g = toy_graph(3, 16);
    const auto mask = mask_edges(3, 0.5, 2);
    const auto res = grad_check(ps, [&](ad::Graph& gr) {
        Binder b(gr, ps);
        const auto Z = backbone_forward(b, cfg, g, mask);
        const auto e = edge_decode(b, Z, mask.pairs());
        const auto u = project_and_predict(b, Z, Role::Student);
        const auto p = decision_head(b, Z, 1.0);
        return ad::add(ad::add(ad::sum(ad::mul(e, e)), ad::mean(u)), ad::sum(p));
    });
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_param;
}

TEST(Checkpoint, RoundTripIsBitExact) {
    ModelConfig cfg;
    Checkpoint ck{cfg, NormStats{-70, 8, -95, 12}, init_params(cfg, 21), TrainingMetadata{3, 21, "abc", "pretrain"}};
    const auto dir = temp_dir("roundtrip");
    save_checkpoint(dir.string(), ck);
    const auto back = load_checkpoint(dir.string());
    EXPECT_EQ(back.config, cfg);
    EXPECT_EQ(back.stats, ck.stats);
    EXPECT_EQ(back.metadata, ck.metadata);
    ASSERT_EQ(back.params.size(), ck.params.size());
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
        EXPECT_EQ(back.params.entry(i).name, ck.params.entry(i).name);
        for (std::size_t k = 0; k < ck.params.entry(i).value.size(); ++k)
            EXPECT_EQ(std::bit_cast<std::uint64_t>(back.params.entry(i).value.data[k]),
                      std::bit_cast<std::uint64_t>(ck.params.entry(i).value.data[k]));
    }
    auto p2 = back.params;
    const auto g = toy_graph(5, 17);
    EXPECT_EQ(infer_powers(ck.params, cfg, g, 0.01), infer_powers(p2, cfg, g, 0.01));
}

TEST(Checkpoint, CorruptionIsNamed) {
    ModelConfig cfg;
    Checkpoint ck{cfg, NormStats{}, init_params(cfg, 22), {}};
    auto expect_kind = [](const fs::path& dir, CheckpointError::Kind kind) {
        try {
            load_checkpoint(dir.string());
            ADD_FAILURE() << "expected CheckpointError";
        } catch (const CheckpointError& e) {
            EXPECT_EQ(e.kind(), kind) << e.what();
        }
    };
    auto rewrite = [](const fs::path& f, const std::string& s) { std::ofstream(f, std::ios::trunc) << s; };
    auto read = [](const fs::path& f) {
        std::ifstream in(f, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };

    const auto d1 = temp_dir("manifest");
    save_checkpoint(d1.string(), ck);
    rewrite(d1 / "manifest", "{ not json");
    expect_kind(d1, CheckpointError::Kind::Manifest);

    const auto d2 = temp_dir("version");
    save_checkpoint(d2.string(), ck);
    auto m = nlohmann::json::parse(read(d2 / "manifest"));
    m["format_version"] = 99;
    rewrite(d2 / "manifest", m.dump());
    expect_kind(d2, CheckpointError::Kind::VersionMismatch);

    const auto d3 = temp_dir("truncated");
    save_checkpoint(d3.string(), ck);
    const auto blob = read(d3 / "params.bin");
    std::ofstream(d3 / "params.bin", std::ios::binary | std::ios::trunc) << blob.substr(0, blob.size() - 16);
    expect_kind(d3, CheckpointError::Kind::Truncated);

    const auto d4 = temp_dir("shape");
    save_checkpoint(d4.string(), ck);
    m = nlohmann::json::parse(read(d4 / "manifest"));
    m["params"][0]["shape"] = {3, 3};
    rewrite(d4 / "manifest", m.dump());
    expect_kind(d4, CheckpointError::Kind::ShapeMismatch);

    EXPECT_THROW(load_checkpoint((fs::temp_directory_path() / "iwgt_no_such_ckpt").string()), FileError);
}
