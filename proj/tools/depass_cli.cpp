// depass command line tool: model generation, forward traces, attribution
// reports, probe training, projection building, evaluation protocols, and the
// neuron-attribution benchmark. Every output artifact gets a sibling
// <out>.manifest.json recording the resolved invocation.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "depass/depass.hpp"
#include "json.hpp"

namespace {

constexpr const char* kToolVersion = "0.1.0";

using depass::TokenId;

// ---- manifest ----

struct Manifest {
    std::string command;
    std::map<std::string, std::string> flags;
    std::string model_fingerprint;
    std::map<std::string, std::string> inputs;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    void flag(const std::string& name, const std::string& value) { flags[name] = value; }
    void flag(const std::string& name, double value) {
        flags[name] = depass::ModelConfig::format_double(value);
    }
    void flag(const std::string& name, std::size_t value) { flags[name] = std::to_string(value); }
    void input(const std::string& path) { inputs[path] = depass::file_digest(path); }

    void write(const std::string& artifact_path) const {
        double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::string s = "{\n  \"command\": \"" + depass::json_escape(command) + "\",\n  \"flags\": {";
        bool first = true;
        for (const auto& [k, v] : flags) {
            s += first ? "\n" : ",\n";
            s += "    \"" + depass::json_escape(k) + "\": \"" + depass::json_escape(v) + "\"";
            first = false;
        }
        s += "\n  },\n  \"model_fingerprint\": \"" + depass::json_escape(model_fingerprint) +
             "\",\n  \"inputs\": {";
        first = true;
        for (const auto& [k, v] : inputs) {
            s += first ? "\n" : ",\n";
            s += "    \"" + depass::json_escape(k) + "\": \"" + depass::json_escape(v) + "\"";
            first = false;
        }
        s += "\n  },\n  \"version\": \"" + std::string(kToolVersion) + "\",\n  \"wall_seconds\": " +
             depass::json_number(wall) + "\n}\n";
        depass::atomic_write_file(artifact_path + ".manifest.json", s);
    }
};

// ---- small parsers ----

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<TokenId> parse_token_ids(const std::string& s) {
    std::vector<TokenId> out;
    for (const auto& piece : split_list(s)) {
        try {
            out.push_back(static_cast<TokenId>(std::stoul(piece)));
        } catch (const std::exception&) {
            throw depass::InputError("bad token id '" + piece + "'");
        }
    }
    if (out.empty()) throw depass::InputError("empty token list");
    return out;
}

std::vector<double> parse_double_grid(const std::string& s) {
    std::vector<double> out;
    for (const auto& piece : split_list(s)) {
        try {
            out.push_back(std::stod(piece));
        } catch (const std::exception&) {
            throw depass::InputError("bad grid value '" + piece + "'");
        }
    }
    if (out.empty()) throw depass::InputError("empty grid");
    return out;
}

std::vector<std::size_t> parse_size_grid(const std::string& s) {
    std::vector<std::size_t> out;
    for (const auto& piece : split_list(s)) {
        try {
            out.push_back(static_cast<std::size_t>(std::stoull(piece)));
        } catch (const std::exception&) {
            throw depass::InputError("bad grid value '" + piece + "'");
        }
    }
    if (out.empty()) throw depass::InputError("empty grid");
    return out;
}

std::vector<std::vector<std::size_t>> bin_groups(std::size_t total, std::size_t bin) {
    if (bin == 0) throw depass::UsageError("--bin must be >= 1");
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t start = 0; start < total; start += bin) {
        std::vector<std::size_t> g;
        for (std::size_t i = start; i < std::min(start + bin, total); ++i) g.push_back(i);
        groups.push_back(std::move(g));
    }
    return groups;
}

depass::ModelConfig config_from_json_file(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(depass::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw depass::ConfigError(path + ": " + e.what());
    }
    if (!j.is_object()) throw depass::ConfigError(path + ": config must be a JSON object");
    depass::ModelConfig c;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "num_layers") c.num_layers = value.get<std::size_t>();
            else if (key == "num_heads") c.num_heads = value.get<std::size_t>();
            else if (key == "num_kv_heads") c.num_kv_heads = value.get<std::size_t>();
            else if (key == "d_model") c.d_model = value.get<std::size_t>();
            else if (key == "d_mlp") c.d_mlp = value.get<std::size_t>();
            else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
            else if (key == "max_seq_len") c.max_seq_len = value.get<std::size_t>();
            else if (key == "mlp_kind") c.mlp_kind = depass::mlp_kind_from_string(value.get<std::string>());
            else if (key == "activation") c.activation = depass::activation_from_string(value.get<std::string>());
            else if (key == "rope") c.rope = value.get<bool>();
            else if (key == "rope_theta") c.rope_theta = value.get<double>();
            else if (key == "norm_eps") c.norm_eps = value.get<double>();
            else if (key == "precision") c.precision = depass::precision_from_string(value.get<std::string>());
            else throw depass::ConfigError(path + ": unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw depass::ConfigError(path + ": key '" + key + "': " + e.what());
        }
    }
    c.validate();
    return c;
}

depass::SubkeySource subkey_from_string(const std::string& s) {
    if (s == "gate") return depass::SubkeySource::gate;
    if (s == "up") return depass::SubkeySource::up;
    if (s == "gate_plus_up" || s == "gate-plus-up") return depass::SubkeySource::gate_plus_up;
    throw depass::ConfigError("unknown subkey source '" + s + "'");
}

depass::InitKind init_kind_from_flag(const std::string& s) {
    if (s == "token" || s == "tokens" || s == "token_wise") return depass::InitKind::token_wise;
    if (s == "heads") return depass::InitKind::attention_heads;
    if (s == "neurons") return depass::InitKind::mlp_neurons;
    if (s == "subspace") return depass::InitKind::subspace;
    throw depass::ConfigError("unknown init '" + s + "' (expected token|heads|neurons|subspace)");
}

// ---- shared option bundles ----

struct TokenSource {
    std::string tokens;
    std::string text;
    std::string vocab_path;

    void attach(CLI::App* cmd) {
        cmd->add_option("--tokens", tokens, "comma-separated token ids");
        cmd->add_option("--text", text, "whitespace-tokenized prompt (needs --vocab)");
        cmd->add_option("--vocab", vocab_path, "vocabulary file, one token per line");
    }

    std::vector<TokenId> resolve(Manifest& mf) const {
        if (!tokens.empty() && !text.empty())
            throw depass::UsageError("--tokens and --text are mutually exclusive");
        if (!tokens.empty()) {
            mf.flag("--tokens", tokens);
            return parse_token_ids(tokens);
        }
        if (!text.empty()) {
            if (vocab_path.empty()) throw depass::UsageError("--text requires --vocab");
            mf.flag("--text", text);
            mf.flag("--vocab", vocab_path);
            mf.input(vocab_path);
            depass::Vocab vocab = depass::Vocab::load(vocab_path);
            return vocab.tokenize(text);
        }
        throw depass::UsageError("provide --tokens or --text with --vocab");
    }

    std::vector<std::string> texts_for(const std::vector<TokenId>& ids) const {
        if (vocab_path.empty()) return {};
        depass::Vocab vocab = depass::Vocab::load(vocab_path);
        std::vector<std::string> out;
        for (TokenId id : ids) out.push_back(vocab.token(id));
        return out;
    }
};

// Runs fn with the archive's native precision.
template <typename F>
void with_model(const std::string& path, Manifest& mf, F&& fn) {
    mf.flag("--model", path);
    mf.input(path);
    if (depass::archive_precision(path) == depass::Precision::f32) {
        auto [cfg, ws] = depass::load_weights<float>(path);
        (void)cfg;
        mf.model_fingerprint = depass::model_fingerprint(ws);
        fn(ws);
    } else {
        auto [cfg, ws] = depass::load_weights<double>(path);
        (void)cfg;
        mf.model_fingerprint = depass::model_fingerprint(ws);
        fn(ws);
    }
}

// ---- projector archive io ----

void save_projector(const depass::ProjectionMatrix& proj, const std::string& path) {
    depass::TensorArchive a;
    a.meta["projector.rank"] = std::to_string(proj.rank);
    a.meta["tool.version"] = kToolVersion;
    a.add("projector", proj.p);
    a.save(path);
}

depass::ProjectionMatrix load_projector(const std::string& path) {
    depass::TensorArchive a = depass::TensorArchive::load(path);
    depass::ProjectionMatrix proj;
    proj.p = a.matrix<double>("projector");
    auto it = a.meta.find("projector.rank");
    if (it == a.meta.end()) throw depass::ArchiveError("projector archive missing rank metadata");
    proj.rank = static_cast<std::size_t>(std::stoull(it->second));
    return proj;
}

depass::Matrix<double> load_directions(const std::string& path) {
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(depass::read_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw depass::InputError(path + ": " + e.what());
        }
        if (!j.is_array() || j.empty()) throw depass::InputError(path + ": expected an array of direction rows");
        if (!j[0].is_array()) j = nlohmann::json::array({j});
        std::size_t d = j[0].size();
        depass::Matrix<double> w(j.size(), d);
        for (std::size_t i = 0; i < j.size(); ++i) {
            if (!j[i].is_array() || j[i].size() != d)
                throw depass::InputError(path + ": direction rows must share one length");
            for (std::size_t k = 0; k < d; ++k) {
                if (!j[i][k].is_number()) throw depass::InputError(path + ": directions must be numeric");
                w(i, k) = j[i][k].get<double>();
            }
        }
        return w;
    }
    depass::TensorArchive a = depass::TensorArchive::load(path);
    for (const char* name : {"directions", "weights"}) {
        bool found = true;
        try {
            a.tensor(name);
        } catch (const depass::ArchiveError&) {
            found = false;
        }
        if (found) return a.matrix<double>(name);
    }
    throw depass::ArchiveError(path + ": no 'directions' or 'weights' tensor");
}

// ---- attribute ----

struct AttributeArgs {
    std::string model, out, init = "token", groups_path, rule = "softmax", target, projector_path;
    std::string format = "json", subkey = "gate", positions;
    std::size_t layer = 0;
    std::size_t bin = 0;
    bool heatmap = false;
    bool selfcheck_on = false, selfcheck_off = false;  // neither: f64 on, f32 off
    TokenSource source;
};

template <typename T>
void run_attribute(const depass::WeightSet<T>& ws, const AttributeArgs& a, Manifest& mf) {
    const depass::ModelConfig& c = ws.config;
    std::vector<TokenId> toks = a.source.resolve(mf);
    depass::ForwardTrace<T> trace = depass::forward(ws, toks);

    depass::InitSpec<T> spec;
    spec.kind = init_kind_from_flag(a.init);
    spec.layer = a.layer;
    if (!a.groups_path.empty() && a.bin != 0)
        throw depass::UsageError("--groups and --bin are mutually exclusive");
    if (!a.groups_path.empty()) {
        if (spec.kind != depass::InitKind::token_wise && spec.kind != depass::InitKind::mlp_neurons)
            throw depass::UsageError("--groups only applies to token or neuron inits");
        mf.input(a.groups_path);
        spec.groups = depass::load_groups_json(a.groups_path);
    } else if (a.bin != 0) {
        if (spec.kind == depass::InitKind::token_wise) spec.groups = bin_groups(toks.size(), a.bin);
        else if (spec.kind == depass::InitKind::mlp_neurons) spec.groups = bin_groups(c.d_mlp, a.bin);
        else throw depass::UsageError("--bin only applies to token or neuron inits");
    }
    if (spec.kind == depass::InitKind::subspace) {
        if (a.projector_path.empty()) throw depass::UsageError("--init subspace requires --projector");
        mf.input(a.projector_path);
        spec.projector = depass::projector_as<T>(load_projector(a.projector_path));
    }

    depass::RunOptions opts;
    opts.rule = depass::apportion_rule_from_string(a.rule);
    opts.gated_subkey = subkey_from_string(a.subkey);

    // target: logit:<id> or direction:<file>@<layer>
    bool is_logit = a.target.rfind("logit:", 0) == 0;
    bool is_direction = a.target.rfind("direction:", 0) == 0;
    if (!is_logit && !is_direction)
        throw depass::UsageError("--target must be logit:<id> or direction:<file>@<layer>");
    TokenId logit_target = 0;
    std::vector<double> direction;
    std::size_t direction_layer = 0;
    if (is_logit) {
        try {
            logit_target = static_cast<TokenId>(std::stoul(a.target.substr(6)));
        } catch (const std::exception&) {
            throw depass::UsageError("bad logit target '" + a.target + "'");
        }
    } else {
        std::string rest = a.target.substr(10);
        auto at = rest.rfind('@');
        if (at == std::string::npos)
            throw depass::UsageError("--target direction needs '@<layer>'");
        std::string file = rest.substr(0, at);
        try {
            direction_layer = static_cast<std::size_t>(std::stoull(rest.substr(at + 1)));
        } catch (const std::exception&) {
            throw depass::UsageError("bad direction layer in '" + a.target + "'");
        }
        mf.input(file);
        direction = depass::load_direction_json(file);
        opts.snapshot_layers.insert(direction_layer);
    }

    std::vector<std::size_t> positions;
    if (!a.positions.empty()) positions = parse_size_grid(a.positions);

    depass::DecomposedRun<T> run = depass::run_decomposed(ws, trace, spec, opts);
    depass::AttributionReport rep =
        is_logit ? depass::make_logit_report(ws, trace, run, logit_target, positions)
                 : depass::make_direction_report(ws, trace, run, direction_layer, direction, positions);

    if (a.selfcheck_on && a.selfcheck_off)
        throw depass::UsageError("--selfcheck and --no-selfcheck are mutually exclusive");
    bool selfcheck = a.selfcheck_on || (!a.selfcheck_off && std::is_same_v<T, double>);
    if (selfcheck) {
        const double tol = depass::tau_rec<T>;
        if (run.max_recon_error > tol)
            throw depass::ConsistencyError("selfcheck: reconstruction error " +
                                           depass::ModelConfig::format_double(run.max_recon_error) +
                                           " above " + depass::ModelConfig::format_double(tol));
        double worst = 0.0;
        for (std::size_t r = 0; r < rep.scores.rows(); ++r) {
            double sum = 0.0;
            for (std::size_t m = 0; m < rep.scores.cols(); ++m) sum += rep.scores(r, m);
            std::size_t pos = rep.positions[r];
            double ref;
            if (is_logit) {
                ref = static_cast<double>(trace.logits(pos, logit_target));
            } else {
                const auto& snap = run.snapshots.at(direction_layer);
                ref = 0.0;
                depass::Matrix<T> full = depass::reconstruct(snap);
                for (std::size_t d = 0; d < full.cols(); ++d)
                    ref += direction[d] * static_cast<double>(full(pos, d));
            }
            double err = std::abs(sum - ref) / (std::abs(ref) + 1e-30);
            worst = std::max(worst, err);
        }
        if (worst > tol)
            throw depass::ConsistencyError("selfcheck: completeness error " +
                                           depass::ModelConfig::format_double(worst) + " above " +
                                           depass::ModelConfig::format_double(tol));
        std::printf("selfcheck: ok (reconstruction %.3g, completeness %.3g)\n",
                    run.max_recon_error, worst);
    }

    mf.flag("--init", a.init);
    mf.flag("--layer", spec.layer);
    mf.flag("--rule", a.rule);
    mf.flag("--target", a.target);
    mf.flag("--format", a.format);
    if (a.bin) mf.flag("--bin", a.bin);
    if (!a.groups_path.empty()) mf.flag("--groups", a.groups_path);
    if (!a.projector_path.empty()) mf.flag("--projector", a.projector_path);
    if (c.mlp_kind == depass::MlpKind::gated) mf.flag("--subkey", a.subkey);
    mf.flag("--selfcheck", std::string(selfcheck ? "on" : "off"));

    std::string payload = a.format == "csv" ? depass::export_report_csv(rep)
                                            : depass::export_report_json(rep);
    depass::atomic_write_file(a.out, payload);
    mf.write(a.out);

    if (a.heatmap) {
        std::vector<std::string> texts;
        if (spec.kind == depass::InitKind::token_wise && spec.groups.empty())
            texts = a.source.texts_for(toks);
        std::fputs(depass::render_heatmap_text(rep, texts).c_str(), stdout);
    }
}

// ---- evaluate ----

struct FaithfulnessArgs {
    std::string model, dataset, methods = "depass", grid, kind = "patch_top", out;
    std::string format = "csv", rule = "softmax";
    bool drop_bos = false;
};

template <typename T>
void run_eval_faithfulness(const depass::WeightSet<T>& ws, const FaithfulnessArgs& a, Manifest& mf) {
    mf.flag("--dataset", a.dataset);
    mf.flag("--methods", a.methods);
    mf.flag("--grid", a.grid);
    mf.flag("--kind", a.kind);
    mf.flag("--format", a.format);
    mf.flag("--rule", a.rule);
    mf.flag("--keep-bos", std::string(a.drop_bos ? "0" : "1"));
    mf.input(a.dataset);

    auto dataset = depass::load_dataset_jsonl(a.dataset);
    auto grid = parse_double_grid(a.grid);
    depass::ApportionRule rule = depass::apportion_rule_from_string(a.rule);

    std::vector<depass::InterventionKind> kinds;
    if (a.kind == "patch_top") kinds = {depass::InterventionKind::patch_top};
    else if (a.kind == "recover_top") kinds = {depass::InterventionKind::recover_top};
    else if (a.kind == "both")
        kinds = {depass::InterventionKind::patch_top, depass::InterventionKind::recover_top};
    else throw depass::ConfigError("unknown kind '" + a.kind + "'");

    std::vector<depass::FaithfulnessCurve> curves;
    for (const auto& name : split_list(a.methods)) {
        depass::TokenScorer<T> scorer;
        if (name == "depass") {
            scorer = [&ws, rule](const depass::ForwardTrace<T>& trace, TokenId target) {
                return depass::depass_token_scores(ws, trace, target, rule);
            };
        } else {
            depass::BaselineMethod bm = depass::baseline_from_string(name);
            scorer = [bm](const depass::ForwardTrace<T>& trace, TokenId) {
                return depass::baseline_scores(trace, bm);
            };
        }
        for (auto kind : kinds)
            curves.push_back(depass::run_faithfulness(ws, dataset, name, scorer, kind, grid, !a.drop_bos));
    }

    std::string payload = a.format == "json" ? depass::curves_to_json(curves)
                                             : depass::curves_to_csv(curves);
    depass::atomic_write_file(a.out, payload);
    mf.write(a.out);
}

struct ComponentsArgs {
    std::string model, dataset, init = "heads", methods = "depass", grid, out;
    std::string format = "csv", rule = "softmax";
    std::size_t layer = 0, bin = 0;
    bool bottom = false;
};

template <typename T>
void run_eval_components(const depass::WeightSet<T>& ws, const ComponentsArgs& a, Manifest& mf) {
    mf.flag("--dataset", a.dataset);
    mf.flag("--init", a.init);
    mf.flag("--layer", a.layer);
    mf.flag("--methods", a.methods);
    mf.flag("--grid", a.grid);
    mf.flag("--format", a.format);
    mf.flag("--rule", a.rule);
    mf.flag("--order", std::string(a.bottom ? "bottom" : "top"));
    if (a.bin) mf.flag("--bin", a.bin);
    mf.input(a.dataset);

    depass::InitSpec<T> spec;
    spec.kind = init_kind_from_flag(a.init);
    spec.layer = a.layer;
    if (spec.kind != depass::InitKind::attention_heads && spec.kind != depass::InitKind::mlp_neurons)
        throw depass::UsageError("component masking needs --init heads or --init neurons");
    if (a.bin != 0) {
        if (spec.kind != depass::InitKind::mlp_neurons)
            throw depass::UsageError("--bin only applies to neuron inits");
        spec.groups = bin_groups(ws.config.d_mlp, a.bin);
    }

    auto dataset = depass::load_dataset_jsonl(a.dataset);
    auto grid = parse_size_grid(a.grid);
    depass::ApportionRule rule = depass::apportion_rule_from_string(a.rule);

    std::vector<depass::MaskingCurve> curves;
    for (const auto& name : split_list(a.methods)) {
        depass::ImportanceMethod method = depass::importance_from_string(name);
        curves.push_back(depass::run_component_masking(ws, dataset, spec, method, !a.bottom, grid, rule));
    }

    std::string payload = a.format == "json" ? depass::masking_to_json(curves)
                                             : depass::masking_to_csv(curves);
    depass::atomic_write_file(a.out, payload);
    mf.write(a.out);
}

struct SubspaceMaskArgs {
    std::string model, probes, out, basis = "all", rule = "softmax";
    double budget = 1.0;
    std::size_t flag_class = 1;
    std::int64_t band_start = -1;
    bool drop_bos = false;
    TokenSource source;
};

template <typename T>
void run_eval_subspace_mask(const depass::WeightSet<T>& ws, const SubspaceMaskArgs& a, Manifest& mf) {
    mf.flag("--probes", a.probes);
    mf.flag("--budget", a.budget);
    mf.flag("--basis", a.basis);
    mf.flag("--flag-class", a.flag_class);
    mf.flag("--rule", a.rule);
    mf.flag("--keep-bos", std::string(a.drop_bos ? "0" : "1"));

    std::vector<depass::LinearProbe> probes;
    for (const auto& path : split_list(a.probes)) {
        mf.input(path);
        probes.push_back(depass::probe_from_archive(depass::TensorArchive::load(path)));
    }
    if (probes.empty()) throw depass::UsageError("--probes must list at least one archive");

    depass::BudgetBasis basis;
    if (a.basis == "all" || a.basis == "all_tokens") basis = depass::BudgetBasis::all_tokens;
    else if (a.basis == "flagged" || a.basis == "flagged_tokens") basis = depass::BudgetBasis::flagged_tokens;
    else throw depass::ConfigError("unknown basis '" + a.basis + "'");

    std::size_t band = a.band_start < 0 ? static_cast<std::size_t>(-1)
                                        : static_cast<std::size_t>(a.band_start);
    if (a.band_start >= 0) mf.flag("--band-start", static_cast<std::size_t>(a.band_start));

    std::vector<TokenId> toks = a.source.resolve(mf);
    depass::ForwardTrace<T> trace = depass::forward(ws, toks);
    depass::SubspaceMaskResult res = depass::depass_subspace_masking(
        ws, trace, probes, a.budget, a.flag_class, basis, band, !a.drop_bos,
        depass::apportion_rule_from_string(a.rule));

    auto num_list = [](const std::vector<double>& v) {
        std::string s = "[";
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) s += ", ";
            s += depass::json_number(v[i]);
        }
        return s + "]";
    };
    auto size_list = [](const auto& v) {
        std::string s = "[";
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) s += ", ";
            s += std::to_string(v[i]);
        }
        return s + "]";
    };
    std::string payload = "{\n  \"mean_flag_prob\": " + num_list(res.mean_flag_prob) +
                          ",\n  \"flagged\": " + size_list(res.flagged) +
                          ",\n  \"flag_mask\": " + size_list(res.flag_mask) +
                          ",\n  \"depass_mask\": " + size_list(res.depass_mask) +
                          ",\n  \"contribution\": " + num_list(res.contribution) +
                          ",\n  \"masked_tokens\": " + size_list(res.masked_tokens) + "\n}\n";
    depass::atomic_write_file(a.out, payload);
    mf.write(a.out);
}

// ---- bench ----

struct BenchArgs {
    std::string model, out, rule = "softmax";
    std::size_t layer = 0;
    std::int64_t target = -1;  // -1: greedy next token
    TokenSource source;
};

template <typename T>
void run_bench(const depass::WeightSet<T>& ws, const BenchArgs& a, Manifest& mf) {
    std::vector<TokenId> toks = a.source.resolve(mf);
    TokenId target;
    if (a.target >= 0) {
        target = static_cast<TokenId>(a.target);
    } else {
        depass::ForwardTrace<T> probe_trace = depass::forward(ws, toks);
        target = depass::greedy_argmax(probe_trace);
    }
    mf.flag("--layer", a.layer);
    mf.flag("--target", std::size_t(target));
    mf.flag("--rule", a.rule);

    depass::BenchResult res = depass::bench_depass_vs_ablation(
        ws, toks, a.layer, target, depass::apportion_rule_from_string(a.rule));

    auto num_list = [](const std::vector<double>& v) {
        std::string s = "[";
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) s += ", ";
            s += depass::json_number(v[i]);
        }
        return s + "]";
    };
    std::string payload = "{\n  \"layer\": " + std::to_string(a.layer) +
                          ",\n  \"target\": " + std::to_string(target) +
                          ",\n  \"d_mlp\": " + std::to_string(ws.config.d_mlp) +
                          ",\n  \"t_depass_seconds\": " + depass::json_number(res.t_depass) +
                          ",\n  \"t_ablation_seconds\": " + depass::json_number(res.t_ablation) +
                          ",\n  \"ratio\": " + depass::json_number(res.ratio) +
                          ",\n  \"depass_scores\": " + num_list(res.depass_scores) +
                          ",\n  \"oracle_scores\": " + num_list(res.oracle_scores) + "\n}\n";
    depass::atomic_write_file(a.out, payload);
    mf.write(a.out);
    std::printf("t_depass %.6f s, t_ablation %.6f s, ratio %.2f\n", res.t_depass, res.t_ablation,
                res.ratio);
}

// ---- main ----

int run_cli(int argc, char** argv) {
    CLI::App app{"decomposed forward pass attribution toolkit"};
    app.require_subcommand(1);
    std::function<void()> action;

    // gen-model
    auto* gen = app.add_subcommand("gen-model", "generate a random model archive");
    {
        static std::string config_path, out;
        static std::uint64_t seed = 0;
        gen->add_option("--config", config_path, "model config JSON")->required();
        gen->add_option("--seed", seed, "RNG seed")->required();
        gen->add_option("--out", out, "output archive path")->required();
        gen->callback([&] {
            action = [&] {
                Manifest mf;
                mf.command = "gen-model";
                mf.flag("--config", config_path);
                mf.flag("--seed", std::size_t(seed));
                mf.flag("--out", out);
                mf.input(config_path);
                depass::ModelConfig c = config_from_json_file(config_path);
                if (c.precision == depass::Precision::f32) {
                    auto ws = depass::generate_random_model<float>(c, seed);
                    mf.model_fingerprint = depass::model_fingerprint(ws);
                    depass::save_weights(ws, out);
                } else {
                    auto ws = depass::generate_random_model<double>(c, seed);
                    mf.model_fingerprint = depass::model_fingerprint(ws);
                    depass::save_weights(ws, out);
                }
                mf.write(out);
                std::printf("wrote %s (fingerprint %s)\n", out.c_str(), mf.model_fingerprint.c_str());
            };
        });
    }

    // forward
    auto* fwd = app.add_subcommand("forward", "run a standard pass and store the trace");
    {
        static std::string model, trace_out;
        static TokenSource source;
        fwd->add_option("--model", model, "model archive")->required();
        source.attach(fwd);
        fwd->add_option("--trace-out", trace_out, "output trace archive")->required();
        fwd->callback([&] {
            action = [&] {
                Manifest mf;
                mf.command = "forward";
                mf.flag("--trace-out", trace_out);
                with_model(model, mf, [&](const auto& ws) {
                    auto toks = source.resolve(mf);
                    auto trace = depass::forward(ws, toks);
                    depass::trace_to_archive(trace, ws).save(trace_out);
                    auto dist = depass::next_token_distribution(trace);
                    TokenId best = depass::greedy_argmax(trace);
                    std::printf("next_token %u p=%.6g\n", unsigned(best), dist[best]);
                });
                mf.write(trace_out);
            };
        });
    }

    // attribute
    auto* attr = app.add_subcommand("attribute", "decomposed attribution report");
    {
        static AttributeArgs a;
        attr->add_option("--model", a.model, "model archive")->required();
        a.source.attach(attr);
        attr->add_option("--init", a.init, "token|heads|neurons|subspace");
        attr->add_option("--layer", a.layer, "init layer (heads/neurons/subspace)");
        attr->add_option("--groups", a.groups_path, "JSON array of index groups");
        attr->add_option("--bin", a.bin, "group size for contiguous binning");
        attr->add_option("--rule", a.rule, "softmax|linear-norm|linear-weighted");
        attr->add_option("--target", a.target, "logit:<id> or direction:<file>@<layer>")->required();
        attr->add_option("--projector", a.projector_path, "projector archive (subspace init)");
        attr->add_option("--positions", a.positions, "query positions (default: last)");
        attr->add_option("--format", a.format, "json|csv")->check(CLI::IsMember({"json", "csv"}));
        attr->add_option("--subkey", a.subkey, "gate|up|gate_plus_up (gated MLP apportioning)");
        attr->add_flag("--heatmap", a.heatmap, "print an ASCII heatmap to stdout");
        attr->add_flag("--selfcheck", a.selfcheck_on,
                       "verify reconstruction and completeness (default: on for f64)");
        attr->add_flag("--no-selfcheck", a.selfcheck_off, "skip the inline verification");
        attr->add_option("--out", a.out, "output report path")->required();
        attr->callback([&] {
            action = [&] {
                Manifest mf;
                mf.command = "attribute";
                mf.flag("--out", a.out);
                with_model(a.model, mf, [&](const auto& ws) { run_attribute(ws, a, mf); });
            };
        });
    }

    // probe-train
    auto* pt = app.add_subcommand("probe-train", "train a linear probe on labeled features");
    {
        static std::string features, out;
        static depass::ProbeHyperparams hp;
        static std::size_t layer = 0;
        pt->add_option("--features", features, "JSONL with features+label per line")->required();
        pt->add_option("--out", out, "output probe archive")->required();
        pt->add_option("--lr", hp.lr, "learning rate");
        pt->add_option("--steps", hp.steps, "full-batch gradient steps");
        pt->add_option("--l2", hp.l2, "weight penalty");
        pt->add_option("--seed", hp.seed, "recorded seed");
        pt->add_option("--layer", layer, "hidden layer the features came from");
        pt->callback([&] {
            action = [&] {
                Manifest mf;
                mf.command = "probe-train";
                mf.flag("--features", features);
                mf.flag("--out", out);
                mf.flag("--lr", hp.lr);
                mf.flag("--steps", hp.steps);
                mf.flag("--l2", hp.l2);
                mf.flag("--seed", std::size_t(hp.seed));
                mf.flag("--layer", layer);
                mf.input(features);
                auto [x, y] = depass::load_probe_jsonl(features);
                depass::LinearProbe probe = depass::train_probe(x, y, hp);
                probe.layer = layer;
                depass::probe_to_archive(probe).save(out);
                mf.write(out);
                std::printf("trained probe: loss %.6g, train accuracy %.4f\n", probe.final_loss,
                            probe.train_accuracy);
            };
        });
    }

    // project
    auto* proj = app.add_subcommand("project", "build an orthogonal projector from directions");
    {
        static std::string directions, out;
        proj->add_option("--directions", directions, "direction rows: archive or JSON")->required();
        proj->add_option("--out", out, "output projector archive")->required();
        proj->callback([&] {
            action = [&] {
                Manifest mf;
                mf.command = "project";
                mf.flag("--directions", directions);
                mf.flag("--out", out);
                mf.input(directions);
                depass::Matrix<double> w = load_directions(directions);
                depass::ProjectionMatrix p = depass::projection_from_directions(w);
                save_projector(p, out);
                mf.write(out);
                std::printf("projector rank %zu (%zu directions, width %zu)\n", p.rank, w.rows(),
                            w.cols());
            };
        });
    }

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "evaluation protocols");
    eval->require_subcommand(1);
    {
        static FaithfulnessArgs fa;
        auto* f = eval->add_subcommand("faithfulness", "token-removal faithfulness curves");
        f->add_option("--model", fa.model, "model archive")->required();
        f->add_option("--dataset", fa.dataset, "JSONL eval examples")->required();
        f->add_option("--methods", fa.methods, "depass,attention_last,attention_mean,attention_rollout");
        f->add_option("--grid", fa.grid, "comma-separated K fractions in (0,1]")->required();
        f->add_option("--kind", fa.kind, "patch_top|recover_top|both");
        f->add_option("--rule", fa.rule, "apportioning rule for depass scores");
        f->add_option("--format", fa.format, "csv|json")->check(CLI::IsMember({"csv", "json"}));
        f->add_flag("--drop-bos", fa.drop_bos, "make the BOS token removable");
        f->add_option("--out", fa.out, "output curves path")->required();
        f->callback([&] {
            action = [&] {
                Manifest mf;
                mf.command = "evaluate faithfulness";
                mf.flag("--out", fa.out);
                with_model(fa.model, mf, [&](const auto& ws) { run_eval_faithfulness(ws, fa, mf); });
            };
        });

        static ComponentsArgs ca;
        auto* cm = eval->add_subcommand("components", "component masking accuracy curves");
        cm->add_option("--model", ca.model, "model archive")->required();
        cm->add_option("--dataset", ca.dataset, "JSONL eval examples")->required();
        cm->add_option("--init", ca.init, "heads|neurons");
        cm->add_option("--layer", ca.layer, "layer whose components are masked")->required();
        cm->add_option("--bin", ca.bin, "neuron group size");
        cm->add_option("--methods", ca.methods, "depass,depass_abs,norm,coef");
        cm->add_option("--grid", ca.grid, "comma-separated component counts")->required();
        cm->add_option("--rule", ca.rule, "apportioning rule for depass scores");
        cm->add_option("--format", ca.format, "csv|json")->check(CLI::IsMember({"csv", "json"}));
        cm->add_flag("--bottom", ca.bottom, "mask lowest-ranked components instead of top");
        cm->add_option("--out", ca.out, "output curves path")->required();
        cm->callback([&] {
            action = [&] {
                Manifest mf;
                mf.command = "evaluate components";
                mf.flag("--out", ca.out);
                with_model(ca.model, mf, [&](const auto& ws) { run_eval_components(ws, ca, mf); });
            };
        });

        static SubspaceMaskArgs sa;
        auto* sm = eval->add_subcommand("subspace-mask", "probe-guided token masking");
        sm->add_option("--model", sa.model, "model archive")->required();
        sa.source.attach(sm);
        sm->add_option("--probes", sa.probes, "comma-separated probe archives")->required();
        sm->add_option("--budget", sa.budget, "flag-mask budget in (0,1]");
        sm->add_option("--basis", sa.basis, "all|flagged");
        sm->add_option("--flag-class", sa.flag_class, "probe class treated as flagged");
        sm->add_option("--band-start", sa.band_start, "first probed layer (default: depth rule)");
        sm->add_option("--rule", sa.rule, "apportioning rule");
        sm->add_flag("--drop-bos", sa.drop_bos, "make the BOS token removable");
        sm->add_option("--out", sa.out, "output JSON path")->required();
        sm->callback([&] {
            action = [&] {
                Manifest mf;
                mf.command = "evaluate subspace-mask";
                mf.flag("--out", sa.out);
                with_model(sa.model, mf, [&](const auto& ws) { run_eval_subspace_mask(ws, sa, mf); });
            };
        });
    }

    // bench
    auto* bench = app.add_subcommand("bench", "runtime benchmarks");
    bench->require_subcommand(1);
    {
        static BenchArgs ba;
        auto* bn = bench->add_subcommand("neurons", "neuron attribution vs per-neuron ablation");
        bn->add_option("--model", ba.model, "model archive")->required();
        ba.source.attach(bn);
        bn->add_option("--layer", ba.layer, "MLP layer to score")->required();
        bn->add_option("--target", ba.target, "target token id (default: greedy next token)");
        bn->add_option("--rule", ba.rule, "apportioning rule");
        bn->add_option("--out", ba.out, "output JSON path")->required();
        bn->callback([&] {
            action = [&] {
                Manifest mf;
                mf.command = "bench neurons";
                mf.flag("--out", ba.out);
                with_model(ba.model, mf, [&](const auto& ws) { run_bench(ws, ba, mf); });
            };
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: USAGE: " << e.what() << "\n";
        return 1;
    }
    action();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const depass::UsageError& e) {
        std::cerr << "error: USAGE: " << e.what() << "\n";
        return 1;
    } catch (const depass::ConfigError& e) {
        std::cerr << "error: CONFIG: " << e.what() << "\n";
        return 2;
    } catch (const depass::ArchiveError& e) {
        std::cerr << "error: ARCHIVE: " << e.what() << "\n";
        return 2;
    } catch (const depass::InputError& e) {
        std::cerr << "error: INPUT: " << e.what() << "\n";
        return 2;
    } catch (const depass::ConsistencyError& e) {
        std::cerr << "error: CONSISTENCY: " << e.what() << "\n";
        return 3;
    } catch (const depass::NumericError& e) {
        std::cerr << "error: NUMERIC: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: INTERNAL: " << e.what() << "\n";
        return 3;
    }
}
