#pragma once

#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "depass/errors.hpp"
#include "depass/tensor.hpp"
#include "depass/vocab.hpp"

namespace depass {

struct EvalExample {
    std::vector<TokenId> tokens;
    TokenId target = 0;
};

namespace detail {

inline nlohmann::json parse_jsonl_line(const std::string& line, const std::string& path, std::size_t lineno) {
    try {
        return nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
}

}  // namespace detail

/// One example per line: {"tokens": [ids], "target": id} or
/// {"text": "...", "target_text": "..."} resolved through the vocab.
inline std::vector<EvalExample> load_dataset_jsonl(const std::string& path, const Vocab* vocab = nullptr) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open dataset: " + path);
    std::vector<EvalExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j = detail::parse_jsonl_line(line, path, lineno);
        EvalExample ex;
        if (j.contains("tokens")) {
            for (const auto& t : j.at("tokens")) ex.tokens.push_back(t.get<TokenId>());
            ex.target = j.at("target").get<TokenId>();
        } else if (j.contains("text")) {
            if (!vocab) throw InputError(path + ": text examples need a vocab");
            ex.tokens = vocab->tokenize(j.at("text").get<std::string>());
            ex.target = vocab->id_of(j.at("target_text").get<std::string>());
        } else {
            throw InputError(path + ":" + std::to_string(lineno) + ": example has neither tokens nor text");
        }
        if (ex.tokens.empty()) {
            throw InputError(path + ":" + std::to_string(lineno) + ": empty token list");
        }
        out.push_back(std::move(ex));
    }
    if (out.empty()) throw InputError("dataset is empty: " + path);
    return out;
}

/// {"features": [numbers], "label": class id} per line; all rows same width.
inline std::pair<Matrix<double>, std::vector<std::size_t>> load_probe_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open probe data: " + path);
    std::vector<std::vector<double>> rows;
    std::vector<std::size_t> labels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j = detail::parse_jsonl_line(line, path, lineno);
        std::vector<double> feat;
        for (const auto& v : j.at("features")) feat.push_back(v.get<double>());
        if (!rows.empty() && feat.size() != rows.front().size()) {
            throw InputError(path + ":" + std::to_string(lineno) + ": inconsistent feature width");
        }
        rows.push_back(std::move(feat));
        labels.push_back(j.at("label").get<std::size_t>());
    }
    if (rows.empty()) throw InputError("probe data is empty: " + path);
    Matrix<double> features(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(rows[i].begin(), rows[i].end(), features.row(i));
    }
    return {std::move(features), std::move(labels)};
}

/// A bare JSON array of numbers, or {"direction": [...]}.
inline std::vector<double> load_direction_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open direction file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
    if (j.is_object() && j.contains("direction")) j = j.at("direction");
    if (!j.is_array() || j.empty()) throw InputError(path + ": expected a non-empty array of numbers");
    std::vector<double> v;
    for (const auto& x : j) v.push_back(x.get<double>());
    return v;
}

/// A JSON array of index arrays, e.g. [[0,1],[2]].
inline std::vector<std::vector<std::size_t>> load_groups_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open groups file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
    if (!j.is_array()) throw InputError(path + ": expected an array of index arrays");
    std::vector<std::vector<std::size_t>> groups;
    for (const auto& g : j) {
        std::vector<std::size_t> idx;
        for (const auto& x : g) idx.push_back(x.get<std::size_t>());
        groups.push_back(std::move(idx));
    }
    return groups;
}

}  // namespace depass
