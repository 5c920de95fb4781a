#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "steerlab/error.hpp"
#include "steerlab/text.hpp"
#include "steerlab/util.hpp"

namespace steerlab::eval {

/// Attribute head words plus hand-verified bigram judgements ("stout man" include, "stout kettle" exclude).
struct AnnotationList {
    std::set<std::string> targets;
    std::set<std::string> include;
    std::set<std::string> exclude;

    void validate() const {
        for (const auto& b : include) {
            require(exclude.count(b) == 0, ErrorCode::SchemaError, "bigram '" + b + "' is both included and excluded");
        }
        auto check_head = [&](const std::string& b) {
            const auto w = text::words(b);
            require(w.size() == 2, ErrorCode::SchemaError, "annotation '" + b + "' is not a bigram");
            require(targets.count(w[0]) != 0, ErrorCode::SchemaError,
                    "annotation '" + b + "' does not begin with a target word");
        };
        for (const auto& b : include) {
            check_head(b);
        }
        for (const auto& b : exclude) {
            check_head(b);
        }
    }

    nlohmann::json to_json() const {
        return {{"targets", targets}, {"include", include}, {"exclude", exclude}};
    }

    static AnnotationList from_json(const nlohmann::json& j) {
        AnnotationList a;
        auto normalise = [](const nlohmann::json& arr, bool bigram) {
            std::set<std::string> out;
            if (arr.is_null()) {
                return out;
            }
            require(arr.is_array(), ErrorCode::SchemaError, "annotation fields must be arrays of strings");
            for (const auto& v : arr) {
                require(v.is_string(), ErrorCode::SchemaError, "annotation fields must be arrays of strings");
                const auto w = text::words(v.get<std::string>());
                out.insert(bigram ? text::join(w, " ") : text::lowercase(text::trim(v.get<std::string>())));
            }
            return out;
        };
        require(j.is_object() && j.contains("targets"), ErrorCode::SchemaError, "annotation file needs 'targets'");
        a.targets = normalise(j.at("targets"), false);
        a.include = normalise(j.value("include", nlohmann::json::array()), true);
        a.exclude = normalise(j.value("exclude", nlohmann::json::array()), true);
        a.validate();
        return a;
    }

    static AnnotationList load(const std::string& path) {
        try {
            return from_json(nlohmann::json::parse(read_file(path)));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::ParseError, path + ": " + e.what());
        }
    }
};

} // namespace steerlab::eval
