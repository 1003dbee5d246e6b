#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Shared scratch space: a generated model and a stored trace, built once.
struct Env {
    fs::path dir;
    std::string cli;
    fs::path config;
    fs::path model;
    fs::path trace;
    std::string tokens = "0,3,7,11,2,9";
    unsigned greedy = 0;

    RunResult run(const std::string& args) const {
        fs::path log = dir / "run.log";
        std::string cmd = cli + " " + args + " > " + log.string() + " 2>&1";
        int status = std::system(cmd.c_str());
        RunResult r;
        r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.output = slurp(log);
        return r;
    }
};

const Env& env() {
    static Env e = [] {
        Env v;
        const char* cli = std::getenv("DEPASS_CLI");
        if (!cli) throw std::runtime_error("DEPASS_CLI is not set; run through ctest");
        v.cli = cli;
        v.dir = fs::temp_directory_path() / ("depass_cli_test_" + std::to_string(::getpid()));
        fs::create_directories(v.dir);

        v.config = v.dir / "config.json";
        std::ofstream(v.config) << R"({"num_layers": 2, "num_heads": 2, "num_kv_heads": 2,
            "d_model": 32, "d_mlp": 64, "vocab_size": 50, "max_seq_len": 16,
            "mlp_kind": "plain", "activation": "silu", "rope": true, "precision": "f64"})";

        v.model = v.dir / "model.bin";
        RunResult g = v.run("gen-model --config " + v.config.string() + " --seed 7 --out " +
                            v.model.string());
        if (g.exit_code != 0) throw std::runtime_error("gen-model failed:\n" + g.output);

        v.trace = v.dir / "trace.bin";
        RunResult f = v.run("forward --model " + v.model.string() + " --tokens " + v.tokens +
                            " --trace-out " + v.trace.string());
        if (f.exit_code != 0) throw std::runtime_error("forward failed:\n" + f.output);
        auto at = f.output.find("next_token ");
        if (at == std::string::npos) throw std::runtime_error("forward printed no next_token line");
        v.greedy = static_cast<unsigned>(std::strtoul(f.output.c_str() + at + 11, nullptr, 10));
        return v;
    }();
    return e;
}

}  // namespace

TEST_CASE("gen-model is deterministic and writes a manifest sibling") {
    const Env& e = env();
    fs::path again = e.dir / "model_again.bin";
    auto r = e.run("gen-model --config " + e.config.string() + " --seed 7 --out " + again.string());
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("fingerprint") != std::string::npos);
    CHECK(slurp(again) == slurp(e.model));

    auto mf = nlohmann::json::parse(slurp(fs::path(again.string() + ".manifest.json")));
    CHECK(mf.at("command") == "gen-model");
    CHECK(mf.at("flags").at("--seed") == "7");
    CHECK(mf.at("model_fingerprint").get<std::string>().size() > 0);
    CHECK(mf.at("version") == "0.1.0");
    CHECK(mf.at("wall_seconds").get<double>() >= 0.0);
    CHECK(mf.at("inputs").contains(e.config.string()));

    auto other = e.run("gen-model --config " + e.config.string() + " --seed 8 --out " +
                       (e.dir / "model_s8.bin").string());
    REQUIRE(other.exit_code == 0);
    CHECK(slurp(e.dir / "model_s8.bin") != slurp(e.model));
}

TEST_CASE("bad usage exits 1 and leaves no partial artifact") {
    const Env& e = env();
    fs::path out = e.dir / "never_written.bin";
    auto r = e.run("gen-model --config " + e.config.string() + " --seed 7 --out " + out.string() +
                   " --frobnicate");
    CHECK(r.exit_code == 1);
    CHECK_FALSE(fs::exists(out));

    auto missing = e.run("gen-model --seed 7 --out " + out.string());
    CHECK(missing.exit_code == 1);
    CHECK_FALSE(fs::exists(out));

    auto none = e.run("");
    CHECK(none.exit_code == 1);
}

TEST_CASE("forward stores a trace and reports the greedy next token") {
    const Env& e = env();
    CHECK(fs::exists(e.trace));
    CHECK(fs::exists(fs::path(e.trace.string() + ".manifest.json")));

    auto bad = e.run("forward --model " + e.model.string() + " --tokens 0,99999 --trace-out " +
                     (e.dir / "bad_trace.bin").string());
    CHECK(bad.exit_code == 2);
    CHECK(bad.output.find("error: ") != std::string::npos);
}

TEST_CASE("a corrupt model archive exits 2") {
    const Env& e = env();
    fs::path junk = e.dir / "junk.bin";
    std::ofstream(junk) << "this is not an archive";
    auto r = e.run("forward --model " + junk.string() + " --tokens 0,1 --trace-out " +
                   (e.dir / "junk_trace.bin").string());
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("error: ") != std::string::npos);
}

TEST_CASE("attribute writes a self-checked report with a manifest") {
    const Env& e = env();
    fs::path out = e.dir / "report.json";
    auto r = e.run("attribute --model " + e.model.string() + " --tokens " + e.tokens +
                   " --init token --target logit:" + std::to_string(e.greedy) + " --selfcheck --out " +
                   out.string());
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("selfcheck: ok") != std::string::npos);

    auto rep = nlohmann::json::parse(slurp(out));
    CHECK(rep.at("target") == "logit:" + std::to_string(e.greedy));
    REQUIRE(rep.at("labels").size() == 6);  // one component per token
    CHECK(rep.at("labels").size() == rep.at("scores").size());
    CHECK(rep.at("token_ids").size() == 6);

    auto mf = nlohmann::json::parse(slurp(fs::path(out.string() + ".manifest.json")));
    CHECK(mf.at("command") == "attribute");
    CHECK(mf.at("flags").at("--selfcheck") == "on");
    CHECK(mf.at("model_fingerprint").get<std::string>().size() > 0);
}

TEST_CASE("attribute --format csv uses the report header") {
    const Env& e = env();
    fs::path out = e.dir / "report.csv";
    auto r = e.run("attribute --model " + e.model.string() + " --tokens " + e.tokens +
                   " --init heads --layer 1 --target logit:3 --format csv --out " + out.string());
    REQUIRE(r.exit_code == 0);
    std::string csv = slurp(out);
    CHECK(csv.rfind("position,component,label,score,normalized\n", 0) == 0);
    CHECK(csv.find("residual") != std::string::npos);
}

TEST_CASE("attribute rejects an out-of-vocabulary logit target with exit 2") {
    const Env& e = env();
    auto r = e.run("attribute --model " + e.model.string() + " --tokens " + e.tokens +
                   " --init token --target logit:999999 --out " + (e.dir / "nope.json").string());
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("error: ") != std::string::npos);

    auto bad = e.run("attribute --model " + e.model.string() + " --tokens " + e.tokens +
                     " --init token --target nonsense --out " + (e.dir / "nope.json").string());
    CHECK(bad.exit_code == 1);
}

TEST_CASE("project builds a projector usable by subspace attribution") {
    const Env& e = env();

    // Two axis directions of width d_model=32.
    nlohmann::json dirs = nlohmann::json::array();
    for (int k = 0; k < 2; ++k) {
        std::vector<double> row(32, 0.0);
        row[k] = 1.0;
        dirs.push_back(row);
    }
    fs::path dpath = e.dir / "directions.json";
    std::ofstream(dpath) << dirs.dump();

    fs::path proj = e.dir / "projector.bin";
    auto r = e.run("project --directions " + dpath.string() + " --out " + proj.string());
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("projector rank 2") != std::string::npos);

    fs::path out = e.dir / "subspace_report.json";
    auto a = e.run("attribute --model " + e.model.string() + " --tokens " + e.tokens +
                   " --init subspace --layer 1 --projector " + proj.string() +
                   " --target logit:3 --out " + out.string());
    REQUIRE(a.exit_code == 0);
    auto rep = nlohmann::json::parse(slurp(out));
    REQUIRE(rep.at("labels").size() == 2);
    CHECK(rep.at("labels")[0] == "subspace");
    CHECK(rep.at("labels")[1] == "complement");
}

TEST_CASE("project rejects all-zero directions with exit 3") {
    const Env& e = env();
    fs::path dpath = e.dir / "zero_directions.json";
    std::ofstream(dpath) << "[[0,0,0,0],[0,0,0,0]]";
    auto r = e.run("project --directions " + dpath.string() + " --out " +
                   (e.dir / "zero_proj.bin").string());
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("error: ") != std::string::npos);
}

TEST_CASE("evaluate faithfulness writes curves with the shared CSV header") {
    const Env& e = env();
    fs::path data = e.dir / "dataset.jsonl";
    {
        nlohmann::json ex;
        ex["tokens"] = {0, 3, 7, 11, 2, 9};
        ex["target"] = e.greedy;
        std::ofstream(data) << ex.dump() << "\n";
    }
    fs::path out = e.dir / "curves.csv";
    auto r = e.run("evaluate faithfulness --model " + e.model.string() + " --dataset " +
                   data.string() + " --methods depass,attention_last --grid 0.25,0.5 --kind both" +
                   " --out " + out.string());
    REQUIRE(r.exit_code == 0);
    std::string csv = slurp(out);
    CHECK(csv.rfind("method,K_or_k,mean_metric,n_examples\n", 0) == 0);
    // 2 methods x 2 kinds x 2 grid points
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
    CHECK(csv.find("depass:patch_top") != std::string::npos);
    CHECK(csv.find("attention_last:recover_top") != std::string::npos);
    CHECK(fs::exists(fs::path(out.string() + ".manifest.json")));
}

TEST_CASE("probe-train then probe-guided masking round-trip") {
    const Env& e = env();
    fs::path feats = e.dir / "features.jsonl";
    {
        std::ofstream f(feats);
        for (int i = 0; i < 8; ++i) {
            nlohmann::json row;
            std::vector<double> x(32, i % 2 ? 1.0 : -1.0);
            x[0] += 0.1 * i;
            row["features"] = x;
            row["label"] = i % 2;
            f << row.dump() << "\n";
        }
    }
    fs::path probe = e.dir / "probe.bin";
    auto t = e.run("probe-train --features " + feats.string() + " --layer 1 --steps 200 --out " +
                   probe.string());
    REQUIRE(t.exit_code == 0);
    CHECK(t.output.find("trained probe") != std::string::npos);

    fs::path out = e.dir / "mask.json";
    auto m = e.run("evaluate subspace-mask --model " + e.model.string() + " --tokens " + e.tokens +
                   " --probes " + probe.string() + " --budget 0.5 --out " + out.string());
    REQUIRE(m.exit_code == 0);
    auto j = nlohmann::json::parse(slurp(out));
    CHECK(j.at("mean_flag_prob").size() == 6);
    CHECK(j.at("flag_mask").size() == j.at("depass_mask").size());
    CHECK(j.at("masked_tokens").size() == 6 - j.at("depass_mask").size());
}

TEST_CASE("evaluate components writes accuracy curves") {
    const Env& e = env();
    fs::path data = e.dir / "dataset.jsonl";  // written by the faithfulness test or here
    if (!fs::exists(data)) {
        nlohmann::json ex;
        ex["tokens"] = {0, 3, 7, 11, 2, 9};
        ex["target"] = e.greedy;
        std::ofstream(data) << ex.dump() << "\n";
    }
    fs::path out = e.dir / "components.csv";
    auto r = e.run("evaluate components --model " + e.model.string() + " --dataset " + data.string() +
                   " --init heads --layer 0 --methods depass,norm --grid 1,2 --out " + out.string());
    REQUIRE(r.exit_code == 0);
    std::string csv = slurp(out);
    CHECK(csv.rfind("method,K_or_k,mean_metric,n_examples\n", 0) == 0);
    CHECK(csv.find("depass:top_k") != std::string::npos);
    CHECK(csv.find("norm:top_k") != std::string::npos);
}

TEST_CASE("bench neurons reports timings and score vectors") {
    const Env& e = env();
    fs::path out = e.dir / "bench.json";
    auto r = e.run("bench neurons --model " + e.model.string() + " --tokens " + e.tokens +
                   " --layer 0 --out " + out.string());
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("ratio") != std::string::npos);
    auto j = nlohmann::json::parse(slurp(out));
    CHECK(j.at("d_mlp") == 64);
    CHECK(j.at("t_depass_seconds").get<double>() > 0.0);
    CHECK(j.at("t_ablation_seconds").get<double>() > 0.0);
    CHECK(j.at("depass_scores").size() == 64);
    CHECK(j.at("oracle_scores").size() == 64);
}
