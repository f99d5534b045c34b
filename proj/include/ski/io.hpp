#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ski/crn_study.hpp"
#include "ski/errors.hpp"
#include "ski/estimation.hpp"
#include "ski/metamodel.hpp"

namespace ski::io {

namespace fs = std::filesystem;
using nlohmann::json;

/// 17 significant digits, enough to round-trip any double.
inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string fmt(long long v) { return std::to_string(v); }

/// Writes to a sibling temporary file and renames it over the target.
inline void atomic_write(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp.string() + " for writing");
        out << content;
        out.flush();
        if (!out) throw Error("failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Comma-separated table with a one-line header.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    [[nodiscard]] std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw FormatError("table has no column '" + name + "'");
    }

    [[nodiscard]] double number(std::size_t row, const std::string& name) const {
        const std::string& cell = rows.at(row).at(column(name));
        try {
            std::size_t used = 0;
            const double v = std::stod(cell, &used);
            if (used != cell.size()) throw std::invalid_argument(cell);
            return v;
        } catch (const std::exception&) {
            if (cell == "nan") return std::numeric_limits<double>::quiet_NaN();
            throw FormatError("row " + std::to_string(row + 2) + ": '" + cell + "' in column " + name +
                              " is not a number");
        }
    }

    [[nodiscard]] std::string to_string() const {
        std::string out;
        auto line = [&out](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                if (i) out += ',';
                out += cells[i];
            }
            out += '\n';
        };
        line(header);
        for (const auto& r : rows) line(r);
        return out;
    }

    static Table parse(const std::string& text) {
        Table t;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            std::vector<std::string> cells;
            std::stringstream ls(line);
            std::string cell;
            while (std::getline(ls, cell, ',')) cells.push_back(cell);
            if (line.back() == ',') cells.emplace_back();
            if (t.header.empty()) {
                t.header = std::move(cells);
                continue;
            }
            if (cells.size() != t.header.size())
                throw FormatError("line " + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                                  " fields, found " + std::to_string(cells.size()));
            t.rows.push_back(std::move(cells));
        }
        if (t.header.empty()) throw FormatError("table is empty (no header line)");
        return t;
    }
};

inline void write_table(const fs::path& path, const Table& t) { atomic_write(path, t.to_string()); }
inline Table read_table(const fs::path& path) { return Table::parse(read_file(path)); }

// ---- sweep tables ----

inline Table sweep_table(const std::vector<SweepRow>& rows) {
    Table t;
    t.header = {"omega", "theta", "sigma_eps_sq", "sigma_zeta_sq", "ratio_mean", "ratio_se", "n_instances"};
    for (const auto& r : rows)
        t.rows.push_back({fmt(r.omega), fmt(r.theta), fmt(r.sigma_eps_sq), fmt(r.sigma_zeta_sq),
                          r.failed ? "nan" : fmt(r.ratio_mean), r.failed ? "nan" : fmt(r.ratio_se),
                          fmt(static_cast<long long>(r.n_instances))});
    return t;
}

inline std::vector<SweepRow> parse_sweep_table(const Table& t) {
    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        SweepRow r;
        r.omega = t.number(i, "omega");
        r.theta = t.number(i, "theta");
        r.sigma_eps_sq = t.number(i, "sigma_eps_sq");
        r.sigma_zeta_sq = t.number(i, "sigma_zeta_sq");
        r.ratio_mean = t.number(i, "ratio_mean");
        r.ratio_se = t.number(i, "ratio_se");
        r.n_instances = static_cast<int>(t.number(i, "n_instances"));
        r.failed = std::isnan(r.ratio_mean);
        rows.push_back(r);
    }
    return rows;
}

// ---- dataset files ----
// Columns: kind, point, x1..xd, value. One `sim` row per simulation replication
// (point = design index) and one `obs` row per real observation (point = the
// design index where it was taken). Every design point needs at least one sim row.

inline Table dataset_table(const Dataset& d) {
    if (!d.has_replications()) throw InputError("dataset files store raw replications");
    Table t;
    t.header = {"kind", "point"};
    for (Index p = 0; p < d.dim(); ++p) t.header.push_back("x" + std::to_string(p + 1));
    t.header.push_back("value");
    auto coords = [&](Index i) {
        std::vector<std::string> c;
        for (Index p = 0; p < d.dim(); ++p) c.push_back(fmt(d.design.matrix()(i, p)));
        return c;
    };
    for (Index i = 0; i < d.k(); ++i)
        for (double y : d.replications[static_cast<std::size_t>(i)]) {
            std::vector<std::string> row{"sim", fmt(static_cast<long long>(i))};
            for (auto& c : coords(i)) row.push_back(c);
            row.push_back(fmt(y));
            t.rows.push_back(std::move(row));
        }
    for (Index j = 0; j < d.ell(); ++j) {
        const Index i = d.obs_index[static_cast<std::size_t>(j)];
        std::vector<std::string> row{"obs", fmt(static_cast<long long>(i))};
        for (auto& c : coords(i)) row.push_back(c);
        row.push_back(fmt(d.z(j)));
        t.rows.push_back(std::move(row));
    }
    return t;
}

inline Dataset parse_dataset(const Table& t) {
    if (t.header.size() < 4 || t.header[0] != "kind" || t.header[1] != "point" || t.header.back() != "value")
        throw FormatError("dataset header must be kind,point,x1..xd,value");
    const Index d = static_cast<Index>(t.header.size()) - 3;
    std::vector<Point> pts;
    std::vector<std::vector<double>> reps;
    std::vector<Index> obs;
    std::vector<double> z;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const std::string& kind = t.rows[r][0];
        const double pv = t.number(r, "point");
        if (pv < 0 || pv != std::floor(pv)) throw FormatError("row " + std::to_string(r + 2) + ": bad point index");
        const auto i = static_cast<Index>(pv);
        Point x(d);
        for (Index p = 0; p < d; ++p) x(p) = t.number(r, t.header[static_cast<std::size_t>(p + 2)]);
        const double value = t.number(r, "value");
        if (kind == "sim") {
            if (i >= static_cast<Index>(pts.size())) {
                pts.resize(static_cast<std::size_t>(i + 1));
                reps.resize(static_cast<std::size_t>(i + 1));
            }
            auto& slot = pts[static_cast<std::size_t>(i)];
            if (slot.size() == 0) slot = x;
            else if (slot != x)
                throw FormatError("row " + std::to_string(r + 2) + ": design point " + std::to_string(i) +
                                  " appears with different coordinates");
            reps[static_cast<std::size_t>(i)].push_back(value);
        } else if (kind == "obs") {
            obs.push_back(i);
            z.push_back(value);
        } else {
            throw FormatError("row " + std::to_string(r + 2) + ": unknown kind '" + kind + "'");
        }
    }
    for (std::size_t i = 0; i < pts.size(); ++i)
        if (reps[i].empty()) throw FormatError("design point " + std::to_string(i) + " has no sim rows");
    for (Index i : obs)
        if (i >= static_cast<Index>(pts.size())) throw FormatError("observation at unknown design point " + std::to_string(i));
    return Dataset::from_replications(PointSet::from_vectors(pts), std::move(reps), obs,
                                      Eigen::Map<Eigen::VectorXd>(z.data(), static_cast<Index>(z.size())));
}

inline void write_dataset(const fs::path& path, const Dataset& d) { write_table(path, dataset_table(d)); }
inline Dataset read_dataset(const fs::path& path) { return parse_dataset(read_table(path)); }

// ---- points files: header x1..xd ----

inline Table points_table(const PointSet& pts) {
    Table t;
    for (Index p = 0; p < pts.dim(); ++p) t.header.push_back("x" + std::to_string(p + 1));
    for (Index i = 0; i < pts.size(); ++i) {
        std::vector<std::string> row;
        for (Index p = 0; p < pts.dim(); ++p) row.push_back(fmt(pts.matrix()(i, p)));
        t.rows.push_back(std::move(row));
    }
    return t;
}

inline PointSet parse_points(const Table& t) {
    Eigen::MatrixXd m(static_cast<Index>(t.rows.size()), static_cast<Index>(t.header.size()));
    for (std::size_t r = 0; r < t.rows.size(); ++r)
        for (std::size_t c = 0; c < t.header.size(); ++c) m(static_cast<Index>(r), static_cast<Index>(c)) = t.number(r, t.header[c]);
    return PointSet(std::move(m));
}

// ---- JSON helpers ----

inline json to_json(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline Eigen::VectorXd vec_from_json(const json& a) {
    if (!a.is_array()) throw FormatError("expected a JSON array of numbers");
    Eigen::VectorXd v(static_cast<Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Index>(i)) = a[i].get<double>();
    return v;
}

/// Parses JSON text; syntax errors carry the 1-based line number.
inline json parse_json(const std::string& text, const std::string& what = "config") {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t upto = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
        const int line = 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n'));
        std::string msg = e.what();
        const auto pos = msg.find("syntax error");
        throw ConfigError(what + ": " + (pos == std::string::npos ? msg : msg.substr(pos)), line);
    }
}

// ---- model files ----

inline constexpr int kModelVersion = 1;

inline json kernel_json(const KernelSpec& k) {
    return json{{"family", "squared_exponential"}, {"spatial_variance", k.spatial_variance},
                {"lengthscales", to_json(k.lengthscales)}};
}

inline KernelSpec kernel_from_json(const json& j) {
    if (j.value("family", "squared_exponential") != "squared_exponential")
        throw FormatError("unsupported kernel family " + j.value("family", std::string()));
    return KernelSpec::anisotropic(j.at("spatial_variance").get<double>(), vec_from_json(j.at("lengthscales")));
}

inline json model_json(const FitReport& rep, const Dataset& data) {
    json params{{"rho", rep.fitted.rho},
                {"beta", to_json(rep.fitted.beta)},
                {"gamma", to_json(rep.fitted.gamma)},
                {"kernel_m", kernel_json(rep.fitted.kernel_m)},
                {"kernel_w", kernel_json(rep.fitted.kernel_w)},
                {"sigma_zeta_sq", rep.fitted.sigma_zeta_sq}};
    json d{{"design", json::array()},
           {"ybar", to_json(data.ybar)},
           {"counts", json::array()},
           {"obs_index", json::array()},
           {"z", to_json(data.z)}};
    for (Index i = 0; i < data.k(); ++i) {
        d["design"].push_back(to_json(data.design[i]));
        d["counts"].push_back(data.counts(i));
    }
    for (Index i : data.obs_index) d["obs_index"].push_back(i);
    return json{{"format", "ski-model"},
                {"version", kModelVersion},
                {"method", to_string(rep.kind)},
                {"basis", "constant"},
                {"params", params},
                {"sigma_eps_hat", to_json(rep.sigma_eps_hat)},
                {"loglik", std::isfinite(rep.loglik) ? nlohmann::json(rep.loglik) : nlohmann::json(nullptr)},
                {"converged", rep.converged},
                {"iterations", rep.iterations},
                {"final_gradient_norm", rep.final_gradient_norm},
                {"restarts_used", rep.restarts_used},
                {"data", d}};
}

struct LoadedModel {
    FitReport report;
    Dataset data;
};

inline LoadedModel model_from_json(const json& j) {
    if (j.value("format", std::string()) != "ski-model") throw FormatError("not a model file");
    const int version = j.value("version", -1);
    if (version != kModelVersion)
        throw FormatError("model file version " + std::to_string(version) + " is not supported (this build reads version " +
                          std::to_string(kModelVersion) + ")");
    LoadedModel m;
    m.report.kind = parse_method(j.at("method").get<std::string>());
    const json& p = j.at("params");
    m.report.fitted.rho = p.at("rho").get<double>();
    m.report.fitted.beta = vec_from_json(p.at("beta"));
    m.report.fitted.gamma = vec_from_json(p.at("gamma"));
    m.report.fitted.kernel_m = kernel_from_json(p.at("kernel_m"));
    m.report.fitted.kernel_w = kernel_from_json(p.at("kernel_w"));
    m.report.fitted.sigma_zeta_sq = p.at("sigma_zeta_sq").get<double>();
    m.report.sigma_eps_hat = vec_from_json(j.at("sigma_eps_hat"));
    // Unfitted reports carry -inf, stored as null.
    m.report.loglik = j.contains("loglik") && j["loglik"].is_number() ? j["loglik"].get<double>()
                                                                       : -std::numeric_limits<double>::infinity();
    m.report.converged = j.value("converged", false);
    m.report.iterations = j.value("iterations", 0);
    m.report.final_gradient_norm = j.value("final_gradient_norm", 0.0);
    m.report.restarts_used = j.value("restarts_used", 0);
    const json& d = j.at("data");
    std::vector<Point> pts;
    for (const auto& x : d.at("design")) pts.push_back(vec_from_json(x));
    Eigen::VectorXi counts(static_cast<Index>(pts.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) counts(static_cast<Index>(i)) = d.at("counts").at(i).get<int>();
    std::vector<Index> obs;
    for (const auto& i : d.at("obs_index")) obs.push_back(i.get<Index>());
    m.data = Dataset::from_summary(PointSet::from_vectors(pts), vec_from_json(d.at("ybar")), counts, obs,
                                   vec_from_json(d.at("z")));
    return m;
}

inline void save_model(const fs::path& path, const FitReport& rep, const Dataset& data) {
    atomic_write(path, model_json(rep, data).dump(2) + "\n");
}

inline LoadedModel load_model(const fs::path& path) {
    try {
        return model_from_json(parse_json(read_file(path), path.string()));
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace ski::io
