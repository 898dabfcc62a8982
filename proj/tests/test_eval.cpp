#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "iwgt/config.hpp"
#include "iwgt/eval.hpp"

using namespace iwgt;

namespace {

ScenarioConfig crowded(std::size_t K) {
    ScenarioConfig sc;
    sc.scenario_id = "crowded";
    sc.K = K;
    sc.region_side_m = 200;
    sc.d_min_m = 20;
    sc.d_max_m = 60;
    return sc;
}

EvalConfig quick_eval() {
    EvalConfig ev;
    ev.wmmse_starts = 8;
    return ev;
}

FinetuneConfig quick_finetune() {
    FinetuneConfig fc;
    fc.warmup_epochs = 1;
    fc.full_epochs = 2;
    fc.n_shot = 8;
    fc.batch_size = 4;
    return fc;
}

ModelConfig tiny_model() {
    ModelConfig m;
    m.L = 1;
    m.d_model = 8;
    m.M = 2;
    m.d_ffn = 8;
    m.d_proj = 4;
    m.d_pred_hidden = 4;
    return m;
}

Checkpoint tiny_checkpoint(const Dataset& train) {
    return finetune(std::nullopt, train, quick_finetune(), tiny_model()).checkpoint;
}

} // namespace

TEST(Evaluate, WmmseDoubleScoresExactlyOne) {
    const auto ds = make_dataset(crowded(4), 12, 1);
    const EvalConfig ev = quick_eval();
    const double sigma2 = noise_power(ds.scenario);
    const WmmseConfig wc = ev.wmmse(ds.scenario.p_max_w());
    const PowerPolicy same = [&](std::size_t i, const ChannelSnapshot& s) {
        return wmmse_best(s.H, sigma2, wc, wmmse_seed_for(ev.seed, i));
    };
    const auto rep = evaluate_policy(same, ds, SumRate{}, ev);
    EXPECT_EQ(rep[Method::Model].ratio_vs_wmmse_best, 1.0);
    EXPECT_EQ(rep[Method::WmmseBest].ratio_vs_wmmse_best, 1.0);
    for (const auto& r : rep.records) EXPECT_EQ(r.model_ratio(), 1.0);
}

TEST(Evaluate, FullReuseBelowWmmseOnCrowdedToy) {
    const auto ds = make_dataset(crowded(4), 30, 2);
    const auto rep = evaluate_policy([&](std::size_t, const ChannelSnapshot& s) { return full_reuse(s.H.K, ds.scenario.p_max_w()); },
                                     ds, SumRate{}, quick_eval());
    EXPECT_LT(rep[Method::FullReuse].ratio_vs_wmmse_best, 1.0);
    EXPECT_EQ(rep[Method::Model].mean_utility, rep[Method::FullReuse].mean_utility);
    for (const auto& r : rep.records) EXPECT_GE(r[Method::WmmseBest].utility, r[Method::FullReuse].utility);
}

TEST(Evaluate, RepeatedRunsIdentical) {
    const auto train = make_dataset(crowded(4), 8, 3);
    const auto test = make_dataset(crowded(4), 10, 4);
    const auto ck = tiny_checkpoint(train);
    const auto a = evaluate(ck, test, SumRate{}, quick_eval());
    const auto b = evaluate(ck, test, SumRate{}, quick_eval());
    EXPECT_EQ(a.records, b.records);
    EXPECT_EQ(results_csv(report_rows(a, "eval", 0, 1)), results_csv(report_rows(b, "eval", 0, 1)));
    EXPECT_EQ(records_csv(a), records_csv(b));
}

TEST(Evaluate, MaskTouchesModelOnly) {
    const auto train = make_dataset(crowded(4), 8, 5);
    const auto test = make_dataset(crowded(4), 10, 6);
    const auto ck = tiny_checkpoint(train);
    EvalConfig masked = quick_eval();
    masked.mask_ratio = 0.5;
    const auto full = evaluate(ck, test, SumRate{}, quick_eval());
    const auto part = evaluate(ck, test, SumRate{}, masked);
    bool any_diff = false;
    for (std::size_t i = 0; i < test.size(); ++i) {
        EXPECT_EQ(full.records[i][Method::WmmseBest], part.records[i][Method::WmmseBest]);
        EXPECT_EQ(full.records[i][Method::FullReuse], part.records[i][Method::FullReuse]);
        any_diff = any_diff || full.records[i][Method::Model].utility != part.records[i][Method::Model].utility;
    }
    EXPECT_TRUE(any_diff);
    EXPECT_EQ(part.mask_ratio, 0.5);
}

TEST(Evaluate, MaskRatioAboveHalfRejected) {
    EvalConfig ev;
    ev.mask_ratio = 0.6;
    const auto ds = make_dataset(crowded(3), 2, 1);
    EXPECT_THROW(compute_baselines(ds, SumRate{}, ev), InvalidArgument);
}

TEST(Evaluate, CheckpointWithoutHeadRejected) {
    Checkpoint ck;
    ck.config = tiny_model();
    ck.params = init_params(ck.config, 0, HeadSet::Pretraining);
    const auto ds = make_dataset(crowded(3), 2, 1);
    EXPECT_THROW(evaluate(ck, ds, SumRate{}, quick_eval()), InvalidArgument);
}

TEST(Evaluate, PolicyOutsideBoxRejected) {
    const auto ds = make_dataset(crowded(3), 2, 1);
    const PowerPolicy bad = [&](std::size_t, const ChannelSnapshot& s) {
        return PowerVector(s.H.K, 2 * ds.scenario.p_max_w());
    };
    EXPECT_THROW(evaluate_policy(bad, ds, SumRate{}, quick_eval()), NumericalFailure);
}

TEST(Aggregates, RecomputedFromRecordsFile) {
    const auto train = make_dataset(crowded(4), 8, 7);
    const auto test = make_dataset(crowded(4), 9, 8);
    const auto ck = tiny_checkpoint(train);
    for (const Objective& obj : std::vector<Objective>{SumRate{}, ProportionalFairness{}, QoS{}}) {
        const auto rep = evaluate(ck, test, obj, quick_eval());
        const auto parsed = parse_records_csv(records_csv(rep));
        ASSERT_EQ(parsed.size(), test.size());
        const auto rows = parse_results_csv(results_csv(report_rows(rep, "eval", 0, param_count(ck.config))));
        ASSERT_EQ(rows.size(), kMethodCount);

        // Independent recomputation straight from the parsed lines.
        double ref = 0;
        for (const auto& r : parsed) ref += r[Method::WmmseBest].utility;
        ref /= static_cast<double>(parsed.size());
        for (std::size_t m = 0; m < kMethodCount; ++m) {
            double u = 0, vs = 0;
            std::size_t vc = 0;
            for (const auto& r : parsed) {
                u += r.methods[m].utility;
                vs += r.methods[m].violated_rate_sum;
                vc += r.methods[m].violated_count;
                double rs = 0;
                for (double x : r.methods[m].rates) rs += x < violation_threshold(obj) ? x : 0.0;
                EXPECT_EQ(rs, r.methods[m].violated_rate_sum);
            }
            u /= static_cast<double>(parsed.size());
            EXPECT_EQ(rows[m].method, method_name(static_cast<Method>(m)));
            EXPECT_EQ(rows[m].mean_utility, u);
            EXPECT_EQ(rows[m].ratio_vs_wmmse_best, u / ref);
            if (vc == 0) {
                EXPECT_TRUE(std::isnan(rows[m].violated_user_rate));
            } else {
                EXPECT_EQ(rows[m].violated_user_rate, vs / static_cast<double>(vc));
            }
        }
    }
}

TEST(Aggregates, UtilitiesMatchRates) {
    const auto ds = make_dataset(crowded(4), 5, 9);
    const auto rep = evaluate_policy([&](std::size_t, const ChannelSnapshot& s) { return PowerVector(s.H.K, 1e-3); }, ds,
                                     QoS{}, quick_eval());
    for (const auto& r : rep.records)
        for (const auto& o : r.methods) EXPECT_EQ(o.utility, utility(o.rates, QoS{}));
}

TEST(Aggregates, NoViolatorsGivesNan) {
    SnapshotRecord r;
    for (auto& o : r.methods) {
        o.utility = 1.0;
        o.rates = {1.0, 2.0};
    }
    const std::vector<SnapshotRecord> recs{r};
    const auto agg = aggregate_records(recs);
    EXPECT_TRUE(std::isnan(agg[0].violated_user_rate));
    EXPECT_EQ(agg[0].ratio_vs_wmmse_best, 1.0);
}

TEST(ResultsCsv, HeaderAndRoundTrip) {
    ResultRow r{"fewshot", "D18-toy", "sumrate", "scratch", 64, 0.3, 1234, 7, 24.5, 0.8125, std::nan("")};
    const std::vector<ResultRow> rows{r};
    const auto text = results_csv(rows);
    EXPECT_EQ(text.substr(0, text.find('\n')),
              "experiment,scenario,objective,method,n_shot,mask_ratio,param_count,seed,mean_utility,ratio_vs_wmmse_best,"
              "violated_user_rate");
    EXPECT_NE(text.find("fewshot,D18-toy,sumrate,scratch,64,0.3,1234,7,24.5,0.8125,nan"), std::string::npos);
    const auto back = parse_results_csv(text);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0].seed, 7u);
    EXPECT_TRUE(std::isnan(back[0].violated_user_rate));
    EXPECT_THROW(parse_results_csv("a,b\n"), ConfigError);
}

TEST(ResultsCsv, NumbersRoundTripExactly) {
    for (double v : {0.1, 1.0 / 3.0, 24.912345678901234, -2.9, 1e-300})
        EXPECT_EQ(std::stod(csv_number(v)), v);
    EXPECT_EQ(csv_number(0.3), "0.3");
}

TEST(FewshotSweep, TwoRowsPerShot) {
    const auto pre_data = std::vector<Dataset>{make_dataset(crowded(4), 12, 10)};
    PretrainConfig pc;
    pc.epochs = 1;
    pc.batch_size = 4;
    const auto pre = pretrain(pre_data, tiny_model(), pc);
    const auto train = make_dataset(crowded(4), 16, 11);
    const auto test = make_dataset(crowded(4), 6, 12);
    const std::vector<std::size_t> shots{8};
    const auto rows = fewshot_sweep(pre.checkpoint, train, test, shots, quick_finetune(), tiny_model(), quick_eval());
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].method, "pretrained");
    EXPECT_EQ(rows[1].method, "scratch");
    for (const auto& r : rows) {
        EXPECT_EQ(r.experiment, "fewshot");
        EXPECT_EQ(r.n_shot, 8u);
        EXPECT_EQ(r.param_count, param_count(tiny_model()));
    }
    const auto scratch_only = fewshot_sweep(std::nullopt, train, test, shots, quick_finetune(), tiny_model(), quick_eval());
    ASSERT_EQ(scratch_only.size(), 1u);
    EXPECT_EQ(scratch_only[0], rows[1]);
    const std::vector<std::size_t> too_many{17};
    EXPECT_THROW(fewshot_sweep(std::nullopt, train, test, too_many, quick_finetune(), tiny_model(), quick_eval()),
                 DatasetTooSmall);
}

TEST(ScalingSweep, SortedAndReproducible) {
    const auto pre_data = std::vector<Dataset>{make_dataset(crowded(4), 10, 13)};
    PretrainConfig pc;
    pc.epochs = 1;
    pc.batch_size = 4;
    const auto train = make_dataset(crowded(4), 8, 14);
    const auto test = make_dataset(crowded(4), 5, 15);
    ModelConfig l0 = tiny_model();
    l0.L = 0;
    l0.d_model = 32;
    l0.d_ffn = 64;
    l0.d_proj = 16;
    l0.d_pred_hidden = 16;
    const std::vector<ModelConfig> models{tiny_model(), l0, tiny_model()};
    const auto rows = scaling_sweep(models, pre_data, train, test, pc, quick_finetune(), quick_eval());
    ASSERT_EQ(rows.size(), 3u);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LE(rows[i - 1].param_count, rows[i].param_count);
    // Encoder 1-32-32 plus head 32-8-1.
    const std::size_t hand = (1 * 32 + 32) + (32 * 32 + 32) + (32 * 8 + 8) + (8 * 1 + 1);
    EXPECT_EQ(param_count(l0), hand);
    const auto it = std::find_if(rows.begin(), rows.end(), [&](const ResultRow& r) { return r.param_count == hand; });
    EXPECT_NE(it, rows.end());
    const auto tiny_rows = std::count_if(rows.begin(), rows.end(),
                                         [&](const ResultRow& r) { return r.param_count == param_count(tiny_model()); });
    ASSERT_EQ(tiny_rows, 2);
    std::vector<ResultRow> dup;
    for (const auto& r : rows)
        if (r.param_count == param_count(tiny_model())) dup.push_back(r);
    EXPECT_EQ(dup[0], dup[1]);
}

TEST(MaskSweep, OneRowPerRatio) {
    const auto train = make_dataset(crowded(4), 8, 16);
    const auto test = make_dataset(crowded(4), 6, 17);
    const auto ck = tiny_checkpoint(train);
    const std::vector<double> ratios{0.1, 0.3, 0.5};
    const auto rows = mask_sweep(ck, test, SumRate{}, ratios, quick_eval());
    ASSERT_EQ(rows.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(rows[i].mask_ratio, ratios[i]);
        EXPECT_EQ(rows[i].experiment, "mask");
    }
    const std::vector<double> bad{0.7};
    EXPECT_THROW(mask_sweep(ck, test, SumRate{}, bad, quick_eval()), InvalidArgument);
}

TEST(Config, BuiltinsRoundTripThroughJson) {
    for (const auto& c : {toy_config(), paper_config()}) {
        const nlohmann::json j = c;
        EXPECT_EQ(nlohmann::json(experiment_from_json(j)), j);
    }
}

TEST(Config, ShippedFilesMatchBuiltins) {
    const std::filesystem::path dir = std::filesystem::path(IWGT_SOURCE_DIR) / "configs";
    EXPECT_EQ(nlohmann::json(load_config((dir / "toy.json").string())), nlohmann::json(toy_config()));
    EXPECT_EQ(nlohmann::json(load_config((dir / "paper.json").string())), nlohmann::json(paper_config()));
}

TEST(Config, UnknownAndIllTypedFieldsNamed) {
    try {
        load_config("toy", {"pretrain.epoch=3"});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("pretrain.epoch"), std::string::npos);
    }
    try {
        load_config("toy", {"model.d_model=\"wide\""});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("model.d_model"), std::string::npos);
    }
    EXPECT_THROW(load_config("toy", {"model.d_model=30"}), ConfigError);
    EXPECT_THROW(load_config("toy", {"scenario=D99"}), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/config.json"), FileError);
}

TEST(Config, OverridesApply) {
    const auto c = load_config("toy", {"pretrain.epochs=3", "finetune.objective=qos", "scenario=D17-toy", "shots=[8,16]"});
    EXPECT_EQ(c.pretrain.epochs, 3u);
    EXPECT_EQ(objective_name(c.finetune.objective), "qos");
    EXPECT_EQ(c.scenario.K, 6u);
    EXPECT_EQ(c.shots, (std::vector<std::size_t>{8, 16}));
}

TEST(Config, ObjectiveJson) {
    const auto q = nlohmann::json::parse(R"({"name":"qos","r_min":0.5,"alpha":20})").get<Objective>();
    EXPECT_EQ(std::get<QoS>(q).r_min, 0.5);
    EXPECT_EQ(std::get<QoS>(q).alpha, 20.0);
    EXPECT_EQ(nlohmann::json(q).get<Objective>(), q);
    EXPECT_THROW(nlohmann::json::parse(R"({"name":"qos","epsilon":1})").get<Objective>(), ConfigError);
    EXPECT_THROW(nlohmann::json("maxmin").get<Objective>(), ConfigError);
}

TEST(Config, ScenarioObjectWithBase) {
    const auto c = load_config("toy", {"scenario={\"base\":\"D16-toy\",\"K\":2}"});
    EXPECT_EQ(c.scenario.K, 2u);
    EXPECT_EQ(c.scenario.d_max_m, 100.0);
}
