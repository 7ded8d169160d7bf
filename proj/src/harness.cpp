#include "tactsim/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <openssl/evp.h>

namespace tactsim {

using nlohmann::json;

namespace {

// --- strict JSON reading --------------------------------------------------------

json parse_strict(const std::string& text, const std::string& origin) {
    std::vector<std::set<std::string>> keys;
    std::string duplicate;
    json::parser_callback_t cb = [&](int, json::parse_event_t ev, json& parsed) {
        if (ev == json::parse_event_t::object_start) {
            keys.emplace_back();
        } else if (ev == json::parse_event_t::object_end) {
            keys.pop_back();
        } else if (ev == json::parse_event_t::key) {
            const auto k = parsed.get<std::string>();
            if (!keys.back().insert(k).second && duplicate.empty()) duplicate = k;
        }
        return true;
    };
    json j;
    try {
        j = json::parse(text, cb);
    } catch (const json::parse_error& e) {
        // Report the line and column of the offending byte.
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        fail(ErrorKind::ParseError,
             origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + std::string(e.what()));
    }
    if (!duplicate.empty()) fail(ErrorKind::ParseError, origin + ": duplicate key '" + duplicate + "'");
    return j;
}

[[noreturn]] void invalid(const std::string& where, const std::string& msg) {
    fail(ErrorKind::ValidationError, where + ": " + msg);
}

// Field access on one JSON object; unknown keys are rejected by finish().
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) invalid(path_, "expected an object");
    }

    bool has(const std::string& k) const { return j_.contains(k); }
    std::string where(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

    const json& raw(const std::string& k) {
        used_.insert(k);
        return j_.at(k);
    }

    std::optional<double> opt_num(const std::string& k) {
        if (!has(k)) return std::nullopt;
        const json& v = raw(k);
        if (!v.is_number()) invalid(where(k), "expected a number");
        const double x = v.get<double>();
        if (!std::isfinite(x)) invalid(where(k), "must be finite");
        return x;
    }
    double num(const std::string& k, double def) { return opt_num(k).value_or(def); }
    double req_num(const std::string& k) {
        if (!has(k)) invalid(where(k), "required field missing");
        return *opt_num(k);
    }
    std::optional<long long> opt_int(const std::string& k) {
        if (!has(k)) return std::nullopt;
        const json& v = raw(k);
        if (!v.is_number_integer()) invalid(where(k), "expected an integer");
        return v.get<long long>();
    }
    int integer(const std::string& k, int def) { return static_cast<int>(opt_int(k).value_or(def)); }
    int req_int(const std::string& k) {
        if (!has(k)) invalid(where(k), "required field missing");
        return static_cast<int>(*opt_int(k));
    }
    std::optional<std::string> opt_str(const std::string& k) {
        if (!has(k)) return std::nullopt;
        const json& v = raw(k);
        if (!v.is_string()) invalid(where(k), "expected a string");
        return v.get<std::string>();
    }
    std::string str(const std::string& k, const std::string& def) { return opt_str(k).value_or(def); }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) invalid(where(it.key()), "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

template <class E>
E pick(const std::string& where, const std::string& value, std::initializer_list<std::pair<const char*, E>> options) {
    std::string names;
    for (const auto& [n, e] : options) {
        if (value == n) return e;
        names += names.empty() ? n : std::string(", ") + n;
    }
    invalid(where, "'" + value + "' is not one of {" + names + "}");
}

DriveParams read_drive(Reader& r, bool require_all) {
    DriveParams p;
    auto get = [&](const char* k, double& dst) {
        if (require_all && !r.has(k)) invalid(r.where(k), "required field missing");
        dst = r.num(k, dst);
    };
    get("g1", p.g1);
    get("g2", p.g2);
    get("Omega1", p.rabi1);
    get("Omega2", p.rabi2);
    get("Omega1_tilde", p.rabi_tilde1);
    get("Omega2_tilde", p.rabi_tilde2);
    get("Delta1", p.detuning1);
    get("Delta2", p.detuning2);
    get("delta1", p.delta1);
    get("delta2", p.delta2);
    get("gamma1", p.gamma1);
    get("gamma2", p.gamma2);
    p.phi = r.num("phi", 0.0);
    if (!r.has("N")) invalid(r.where("N"), "required field missing");
    p.atoms = r.req_int("N");
    p.n_max = r.integer("n_max", p.n_max);
    return p;
}

json drive_json(const DriveParams& p) {
    return {{"g1", p.g1},         {"g2", p.g2},         {"Omega1", p.rabi1},     {"Omega2", p.rabi2},
            {"Omega1_tilde", p.rabi_tilde1}, {"Omega2_tilde", p.rabi_tilde2}, {"Delta1", p.detuning1},
            {"Delta2", p.detuning2}, {"delta1", p.delta1}, {"delta2", p.delta2}, {"gamma1", p.gamma1},
            {"gamma2", p.gamma2}, {"phi", p.phi},       {"N", p.atoms},         {"n_max", p.n_max}};
}

CoeffMode read_mode(Reader& r) {
    return pick<CoeffMode>(r.where("coeff_mode"), r.str("coeff_mode", "approx"),
                           {{"approx", CoeffMode::Approx}, {"exact", CoeffMode::Exact}});
}

const char* mode_name(CoeffMode m) { return m == CoeffMode::Exact ? "exact" : "approx"; }

bool is_spin_family(ModelKind m) {
    return m == ModelKind::Full || m == ModelKind::Intermediate || m == ModelKind::Lmg || m == ModelKind::Oat;
}

bool has_fock(ModelKind m) {
    return m == ModelKind::Full || m == ModelKind::Intermediate || m == ModelKind::TwoCavityFull;
}

std::vector<std::string> supported_channels(ModelKind m) {
    std::vector<std::string> c;
    if (is_spin_family(m))
        c = {"xi2", "xi2_db", "fidelity", "mean_sz"};
    else
        c = {"delta_prime", "entropy_L", "qfi_11", "qfi_12", "qfi_22", "fidelity"};
    if (has_fock(m)) {
        c.emplace_back("photon_number");
        c.emplace_back("top_fock_pop");
    }
    return c;
}

bool dissipative(const Scenario& s) {
    return s.dissipation && (s.dissipation->kappa > 0.0 || s.dissipation->gamma_d > 0.0 ||
                             std::any_of(s.dissipation->gamma_ks.begin(), s.dissipation->gamma_ks.end(),
                                         [](const auto& row) {
                                             return std::any_of(row.begin(), row.end(), [](double g) { return g > 0.0; });
                                         }));
}

std::string short_num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", x);
    return buf;
}

} // namespace

std::string to_string(ModelKind m) {
    switch (m) {
        case ModelKind::Full: return "full";
        case ModelKind::Intermediate: return "intermediate";
        case ModelKind::Lmg: return "lmg";
        case ModelKind::Oat: return "oat";
        case ModelKind::TwoCavityFull: return "two_cavity_full";
        case ModelKind::Tmss: return "tmss";
    }
    return "?";
}

// --- scenario parsing ---------------------------------------------------------------

Scenario parse_scenario(const std::string& text, const std::string& origin) {
    const json j = parse_strict(text, origin);
    Reader top(j, "");
    Scenario s;
    s.name = top.str("name", "");
    if (!top.has("model")) invalid("model", "required field missing");
    s.model = pick<ModelKind>("model", *top.opt_str("model"),
                              {{"full", ModelKind::Full},
                               {"intermediate", ModelKind::Intermediate},
                               {"lmg", ModelKind::Lmg},
                               {"oat", ModelKind::Oat},
                               {"two_cavity_full", ModelKind::TwoCavityFull},
                               {"tmss", ModelKind::Tmss}});

    if (!top.has("params")) invalid("params", "required field missing");
    Reader p(top.raw("params"), "params");
    switch (s.model) {
        case ModelKind::Full:
            s.drive = read_drive(p, true);
            break;
        case ModelKind::Intermediate:
            s.drive = read_drive(p, true);
            s.coeff_mode = read_mode(p);
            break;
        case ModelKind::Lmg:
        case ModelKind::Oat: {
            auto& sp = s.spin;
            sp.atom_basis = pick<bool>(p.where("basis"), p.str("basis", "dicke"), {{"dicke", false}, {"atoms", true}});
            if (p.has("drive")) {
                Reader d(p.raw("drive"), "params.drive");
                sp.drive = read_drive(d, true);
                d.finish();
                sp.coeff_mode = read_mode(p);
                sp.atoms = sp.drive->atoms;
            } else {
                sp.atoms = p.req_int("N");
                sp.c_z = p.num("c_z", 0.0);
                sp.phi = p.num("phi", 0.0);
                sp.delta = p.opt_num("delta");
                sp.gamma = p.opt_num("gamma");
                sp.A = p.opt_num("A");
                sp.B = p.opt_num("B");
                sp.A_N_over_delta = p.opt_num("A_N_over_delta");
                sp.B_over_A = p.opt_num("B_over_A");
                const bool couplings = sp.A || sp.B || sp.A_N_over_delta || sp.B_over_A || sp.delta || sp.gamma;
                if (couplings) {
                    if (!sp.delta) invalid("params.delta", "required with the coupling form");
                    if (!(*sp.delta > 0.0)) invalid("params.delta", "must be positive");
                    if (!sp.A && !sp.A_N_over_delta) invalid("params.A", "required with the coupling form");
                    if (s.model == ModelKind::Lmg) {
                        if (!sp.gamma) invalid("params.gamma", "required with the coupling form");
                        if (!(*sp.gamma > 0.0)) invalid("params.gamma", "must be positive");
                        if (!sp.B && !sp.B_over_A) invalid("params.B", "required with the coupling form");
                    }
                } else if (s.model == ModelKind::Lmg) {
                    if (!p.has("c_x")) invalid("params.c_x", "required field missing");
                    if (!p.has("c_y")) invalid("params.c_y", "required field missing");
                    sp.c_x = p.req_num("c_x");
                    sp.c_y = p.req_num("c_y");
                } else {
                    sp.c_x = p.req_num("chi");
                }
            }
            break;
        }
        case ModelKind::Tmss:
            s.tmss.spin_left = p.req_num("S_L");
            s.tmss.spin_right = p.req_num("S_R");
            s.tmss.J = p.num("J", 0.0);
            s.tmss.chi = p.num("chi", 1.0);
            break;
        case ModelKind::TwoCavityFull: {
            auto tc = TwoCavityParams::symmetric(p.req_num("A"), p.req_num("B"), p.req_num("delta"), p.req_num("gamma"),
                                                 p.num("J_tilde", 0.0), p.req_num("S_L"), p.req_num("S_R"),
                                                 p.integer("n_max", 2));
            tc.delta_omega = p.num("delta_omega", tc.delta_omega);
            s.two_cavity = tc;
            break;
        }
    }
    p.finish();

    if (top.has("dissipation")) {
        Reader d(top.raw("dissipation"), "dissipation");
        DissipationParams dp;
        dp.kappa = d.num("kappa", 0.0);
        dp.gamma_d = d.num("gamma_d", 0.0);
        if (d.has("gamma_ks")) {
            const json& g = d.raw("gamma_ks");
            if (!g.is_array()) invalid("dissipation.gamma_ks", "expected an array of 4-element rows");
            for (const auto& row : g) {
                if (!row.is_array() || row.size() != 4) invalid("dissipation.gamma_ks", "rows need 4 rates");
                std::array<double, 4> r{};
                for (std::size_t k = 0; k < 4; ++k) {
                    if (!row[k].is_number()) invalid("dissipation.gamma_ks", "rates must be numbers");
                    r[k] = row[k].get<double>();
                }
                dp.gamma_ks.push_back(r);
            }
        }
        d.finish();
        try {
            dp.validate();
        } catch (const Error& e) {
            invalid("dissipation", e.what());
        }
        s.dissipation = dp;
    }

    if (top.has("initial_state")) {
        const json& is = top.raw("initial_state");
        if (is.is_string()) {
            const auto v = is.get<std::string>();
            if (v != "all_atoms_in_1_cavity_vacuum" && v != "stretched")
                invalid("initial_state", "'" + v + "' is not one of {all_atoms_in_1_cavity_vacuum, stretched, custom}");
        } else {
            Reader r(is, "initial_state");
            const json& amps = r.raw("custom");
            if (!amps.is_array() || amps.empty()) invalid("initial_state.custom", "expected [[re, im], ...]");
            Vec v(static_cast<Eigen::Index>(amps.size()));
            for (std::size_t i = 0; i < amps.size(); ++i) {
                const auto& a = amps[i];
                if (a.is_number()) {
                    v[static_cast<Eigen::Index>(i)] = a.get<double>();
                } else if (a.is_array() && a.size() == 2 && a[0].is_number() && a[1].is_number()) {
                    v[static_cast<Eigen::Index>(i)] = cplx(a[0].get<double>(), a[1].get<double>());
                } else {
                    invalid("initial_state.custom", "entry " + std::to_string(i) + " is not a number or [re, im]");
                }
            }
            r.finish();
            s.custom_state = v;
        }
    }

    if (top.has("integrator")) {
        Reader r(top.raw("integrator"), "integrator");
        auto& c = s.integrator;
        c.method = pick<Method>("integrator.method", r.str("method", "rk4"),
                                {{"rk4", Method::RK4}, {"adaptive", Method::Adaptive}});
        s.solver = pick<SolverChoice>("integrator.solver", r.str("solver", "auto"),
                                      {{"auto", SolverChoice::Auto},
                                       {"schrodinger", SolverChoice::Schrodinger},
                                       {"lindblad", SolverChoice::Lindblad},
                                       {"mcwf", SolverChoice::Mcwf}});
        c.t_final = r.req_num("t_final");
        c.n_output = r.integer("n_output", c.n_output);
        c.oversample = r.num("oversample", c.oversample);
        c.dt = r.opt_num("dt");
        c.rtol = r.num("rtol", c.rtol);
        c.atol = r.num("atol", c.atol);
        if (auto seed = r.opt_int("seed")) {
            if (*seed < 0) invalid("integrator.seed", "must be >= 0");
            c.seed = static_cast<std::uint64_t>(*seed);
        }
        c.n_traj = r.integer("n_traj", c.n_traj);
        r.finish();
        if (c.t_final == 0.0) c.n_output = 1;
        try {
            c.validate();
        } catch (const Error& e) {
            invalid("integrator", e.what());
        }
    } else {
        invalid("integrator", "required field missing");
    }

    const auto supported = supported_channels(s.model);
    if (top.has("observables")) {
        const json& o = top.raw("observables");
        if (!o.is_array()) invalid("observables", "expected an array of channel names");
        for (const auto& n : o) {
            if (!n.is_string()) invalid("observables", "channel names must be strings");
            const auto name = n.get<std::string>();
            if (std::find(supported.begin(), supported.end(), name) == supported.end())
                invalid("observables", "channel '" + name + "' is not available for model " + to_string(s.model));
            if (std::find(s.observables.begin(), s.observables.end(), name) != s.observables.end())
                invalid("observables", "channel '" + name + "' listed twice");
            s.observables.push_back(name);
        }
    }
    if (s.observables.empty()) s.observables = supported;

    if (top.has("comparator")) {
        s.comparator = *top.opt_str("comparator");
        const bool ok = (*s.comparator == "lmg" && (s.model == ModelKind::Full || s.model == ModelKind::Intermediate)) ||
                        (*s.comparator == "oat" && s.model == ModelKind::Lmg);
        if (!ok) invalid("comparator", "'" + *s.comparator + "' cannot accompany model " + to_string(s.model));
    }

    if (top.has("sweep")) {
        const json& sw = top.raw("sweep");
        if (!sw.is_object() || sw.size() != 1) invalid("sweep", "expected exactly one axis among N, J, S_R");
        SweepAxis ax;
        ax.name = sw.begin().key();
        if (ax.name != "N" && ax.name != "J" && ax.name != "S_R") invalid("sweep." + ax.name, "unknown sweep axis");
        const json& vals = sw.begin().value();
        if (!vals.is_array() || vals.empty()) invalid("sweep." + ax.name, "expected a non-empty list");
        for (const auto& v : vals) {
            if (!v.is_number()) invalid("sweep." + ax.name, "values must be numbers");
            ax.values.push_back(v.get<double>());
        }
        const bool spin_model = is_spin_family(s.model);
        if ((ax.name == "J" || ax.name == "S_R") && spin_model)
            invalid("sweep." + ax.name, "axis applies to two-mode models only");
        if (ax.name == "N")
            for (double v : ax.values)
                if (v < 1.0 || v != std::floor(v)) invalid("sweep.N", "atom counts must be positive integers");
        s.sweep = ax;
    }

    if (top.has("output")) {
        Reader r(top.raw("output"), "output");
        s.output_path = r.str("path", "");
        s.format = pick<OutputFormat>("output.format", r.str("format", "csv"),
                                      {{"csv", OutputFormat::Csv}, {"json", OutputFormat::Json}});
        r.finish();
    }
    if (top.has("limits")) {
        Reader r(top.raw("limits"), "limits");
        s.limits.max_vector_dim = static_cast<std::size_t>(r.integer("max_vector_dim", 4'000'000));
        s.limits.max_dense_dim = static_cast<std::size_t>(r.integer("max_dense_dim", 4096));
        r.finish();
    }
    top.finish();

    // Model-level consistency.
    try {
        if (s.model == ModelKind::Full || s.model == ModelKind::Intermediate) s.drive.validate();
        if (s.model == ModelKind::Intermediate) effective_coeffs(s.drive, s.coeff_mode);
        if (s.spin.drive) effective_coeffs(*s.spin.drive, s.spin.coeff_mode);
        if (s.model == ModelKind::TwoCavityFull) s.two_cavity.validate();
        if (s.model == ModelKind::Tmss) {
            Dicke::from_spin(s.tmss.spin_left);
            Dicke::from_spin(s.tmss.spin_right);
        }
    } catch (const Error& e) {
        invalid("params", e.what());
    }
    if (dissipative(s)) {
        const bool mixed_only = std::any_of(s.observables.begin(), s.observables.end(), [](const std::string& n) {
            return n == "entropy_L" || n.rfind("qfi_", 0) == 0;
        });
        if (mixed_only) invalid("observables", "entropy_L and qfi_* are defined for pure states only");
        if (s.model == ModelKind::Tmss || s.model == ModelKind::Oat)
            invalid("dissipation", "model " + to_string(s.model) + " is dissipation-free");
        if (s.model == ModelKind::Intermediate || s.model == ModelKind::TwoCavityFull) {
            if (s.dissipation->gamma_d > 0.0 || !s.dissipation->gamma_ks.empty())
                invalid("dissipation.gamma_d", "model " + to_string(s.model) + " carries cavity loss only");
        }
        if (s.model == ModelKind::Lmg && !s.spin.drive) {
            if (!s.spin.delta) invalid("dissipation", "collective rates need the coupling or drive form of params");
            if (s.dissipation->gamma_d > 0.0) invalid("dissipation.gamma_d", "individual rates need params.drive");
        }
        if (!s.dissipation->gamma_ks.empty() && s.model != ModelKind::Full)
            invalid("dissipation.gamma_ks", "per-atom rates apply to the full model only");
    } else if (s.solver == SolverChoice::Lindblad || s.solver == SolverChoice::Mcwf) {
        // Allowed: a dissipation-free Lindblad or trajectory run is a valid consistency check.
    }
    return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open scenario " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_scenario(ss.str(), path.string());
}

json Scenario::canonical() const {
    json j;
    j["model"] = to_string(model);
    j["name"] = name;
    json p;
    switch (model) {
        case ModelKind::Full: p = drive_json(drive); break;
        case ModelKind::Intermediate:
            p = drive_json(drive);
            p["coeff_mode"] = mode_name(coeff_mode);
            break;
        case ModelKind::Lmg:
        case ModelKind::Oat: {
            p["basis"] = spin.atom_basis ? "atoms" : "dicke";
            if (spin.drive) {
                p["drive"] = drive_json(*spin.drive);
                p["coeff_mode"] = mode_name(spin.coeff_mode);
            } else {
                p["N"] = spin.atoms;
                p["c_z"] = spin.c_z;
                p["c_x"] = spin.c_x;
                p["c_y"] = spin.c_y;
                p["phi"] = spin.phi;
                auto opt = [&](const char* k, const std::optional<double>& v) {
                    if (v) p[k] = *v;
                };
                opt("A", spin.A);
                opt("B", spin.B);
                opt("delta", spin.delta);
                opt("gamma", spin.gamma);
                opt("A_N_over_delta", spin.A_N_over_delta);
                opt("B_over_A", spin.B_over_A);
            }
            break;
        }
        case ModelKind::Tmss:
            p = {{"S_L", tmss.spin_left}, {"S_R", tmss.spin_right}, {"J", tmss.J}, {"chi", tmss.chi}};
            break;
        case ModelKind::TwoCavityFull:
            p = {{"A", two_cavity.A_left},        {"B", two_cavity.B_left},
                 {"delta", two_cavity.delta_left}, {"gamma", two_cavity.gamma_right},
                 {"J_tilde", two_cavity.J_tilde},  {"S_L", two_cavity.spin_left},
                 {"S_R", two_cavity.spin_right},   {"n_max", two_cavity.n_max},
                 {"delta_omega", two_cavity.delta_omega}};
            break;
    }
    j["params"] = p;
    if (dissipation) {
        j["dissipation"] = {{"kappa", dissipation->kappa}, {"gamma_d", dissipation->gamma_d}};
        if (!dissipation->gamma_ks.empty()) j["dissipation"]["gamma_ks"] = dissipation->gamma_ks;
    }
    if (custom_state) {
        json a = json::array();
        for (Eigen::Index i = 0; i < custom_state->size(); ++i)
            a.push_back({(*custom_state)[i].real(), (*custom_state)[i].imag()});
        j["initial_state"] = {{"custom", a}};
    } else {
        j["initial_state"] = "stretched";
    }
    const auto& c = integrator;
    j["integrator"] = {{"method", c.method == Method::RK4 ? "rk4" : "adaptive"},
                       {"solver", solver == SolverChoice::Auto          ? "auto"
                                  : solver == SolverChoice::Schrodinger ? "schrodinger"
                                  : solver == SolverChoice::Lindblad    ? "lindblad"
                                                                        : "mcwf"},
                       {"t_final", c.t_final},
                       {"n_output", c.n_output},
                       {"oversample", c.oversample},
                       {"rtol", c.rtol},
                       {"atol", c.atol},
                       {"seed", c.seed},
                       {"n_traj", c.n_traj}};
    if (c.dt) j["integrator"]["dt"] = *c.dt;
    j["observables"] = observables;
    if (comparator) j["comparator"] = *comparator;
    if (sweep) j["sweep"] = {{sweep->name, sweep->values}};
    j["limits"] = {{"max_vector_dim", limits.max_vector_dim}, {"max_dense_dim", limits.max_dense_dim}};
    return j;
}

std::string Scenario::hash() const {
    const std::string text = canonical().dump();
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1)
        fail(ErrorKind::IoError, "digest computation failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

// --- model assembly ---------------------------------------------------------------------

namespace {

struct SpinCoeffs {
    double c_z = 0.0, c_x = 0.0, c_y = 0.0, phi = 0.0;
    std::optional<EffectiveCoeffs> coeffs;
};

SpinCoeffs resolve_spin(const SpinModelParams& sp) {
    SpinCoeffs r;
    if (sp.drive) {
        const auto c = effective_coeffs(*sp.drive, sp.coeff_mode);
        r = {c.c_z, c.c_x, c.c_y, sp.drive->phi, c};
        return r;
    }
    r.c_z = sp.c_z;
    r.phi = sp.phi;
    if (sp.delta) {
        const double A = sp.A ? *sp.A : *sp.A_N_over_delta * *sp.delta / sp.atoms;
        r.c_x = A * A / (4.0 * *sp.delta);
        if (sp.gamma) {
            const double B = sp.B ? *sp.B : *sp.B_over_A * A;
            r.c_y = B * B / (4.0 * *sp.gamma);
        }
        EffectiveCoeffs c;
        c.A = A;
        c.B = sp.B ? *sp.B : (sp.B_over_A ? *sp.B_over_A * A : 0.0);
        c.delta = c.delta_shifted = *sp.delta;
        c.gamma = c.gamma_shifted = sp.gamma.value_or(0.0);
        c.c_z = r.c_z;
        c.c_x = c.c_x_approx = c.chi = r.c_x;
        c.c_y = c.c_y_approx = r.c_y;
        r.coeffs = c;
    } else {
        r.c_x = sp.c_x;
        r.c_y = sp.c_y;
    }
    return r;
}

HilbertSpace spin_space(const SpinModelParams& sp, const SpaceLimits& limits) {
    if (sp.atoms < 1) fail(ErrorKind::ValidationError, "params.N must be >= 1");
    if (sp.atom_basis) return make_space({AtomLevels{2, sp.atoms}}, limits);
    return make_space({Dicke{sp.atoms}}, limits);
}

} // namespace

BuiltModel build_model(const Scenario& s) {
    BuiltModel b;
    const bool diss = dissipative(s);
    switch (s.model) {
        case ModelKind::Full: {
            b.space = full_space(s.drive, s.limits);
            b.hamiltonian = build_full_hamiltonian(s.drive, b.space);
            if (diss) b.channels = full_jump_operators(b.space, *s.dissipation);
            b.spin = 0.5 * s.drive.atoms;
            try {
                b.coeffs = effective_coeffs(s.drive, CoeffMode::Approx);
                b.regime = validate_regime(s.drive, *b.coeffs);
            } catch (const Error&) {
                // Asymmetric drives have no single-TACT reduction; the full model still runs.
            }
            break;
        }
        case ModelKind::Intermediate: {
            const auto c = effective_coeffs(s.drive, s.coeff_mode);
            b.space = make_space({Dicke{s.drive.atoms}, Fock{s.drive.n_max}}, s.limits);
            b.hamiltonian = build_intermediate_hamiltonian(c, s.drive.phi, b.space);
            if (diss && s.dissipation->kappa > 0.0)
                b.channels.push_back({boson_ops(b.space, 1).a, s.dissipation->kappa, "cavity"});
            b.spin = 0.5 * s.drive.atoms;
            b.coeffs = c;
            b.regime = validate_regime(s.drive, c);
            break;
        }
        case ModelKind::Lmg:
        case ModelKind::Oat: {
            const auto rc = resolve_spin(s.spin);
            b.space = spin_space(s.spin, s.limits);
            b.hamiltonian = s.model == ModelKind::Lmg ? build_lmg_hamiltonian(rc.c_z, rc.c_x, rc.c_y, rc.phi, b.space)
                                                      : build_oat_hamiltonian(rc.c_x, b.space);
            b.spin = 0.5 * s.spin.atoms;
            b.coeffs = rc.coeffs;
            if (s.spin.drive && rc.coeffs) b.regime = validate_regime(*s.spin.drive, *rc.coeffs);
            if (diss) {
                if (s.spin.drive) {
                    b.channels = effective_dissipators(*s.spin.drive, *rc.coeffs, *s.dissipation, b.space);
                } else {
                    const auto ops = collective_spin_ops(b.space, 0);
                    const auto& c = *rc.coeffs;
                    const double k = s.dissipation->kappa;
                    if (k > 0.0 && c.A != 0.0) b.channels.push_back({ops.x, k * c.A * c.A / (4.0 * c.delta * c.delta), "collective_Sx"});
                    if (k > 0.0 && c.B != 0.0 && c.gamma != 0.0)
                        b.channels.push_back({ops.y, k * c.B * c.B / (4.0 * c.gamma * c.gamma), "collective_Sy"});
                }
            }
            break;
        }
        case ModelKind::Tmss: {
            b.space = tmss_space(s.tmss.spin_left, s.tmss.spin_right, s.limits);
            b.hamiltonian = build_tmss_hamiltonian(s.tmss, b.space);
            break;
        }
        case ModelKind::TwoCavityFull: {
            b.space = two_cavity_space(s.two_cavity, s.limits);
            b.hamiltonian = build_two_cavity_hamiltonian(s.two_cavity, b.space);
            if (diss && s.dissipation->kappa > 0.0) {
                b.channels.push_back({boson_ops(b.space, 1).a, s.dissipation->kappa, "cavity_L"});
                b.channels.push_back({boson_ops(b.space, 3).a, s.dissipation->kappa, "cavity_R"});
            }
            break;
        }
    }
    if (s.custom_state) {
        if (static_cast<std::size_t>(s.custom_state->size()) != b.space.dimension())
            fail(ErrorKind::ValidationError, "initial_state.custom: " + std::to_string(s.custom_state->size()) +
                                                 " amplitudes for dimension " + std::to_string(b.space.dimension()));
        if (std::abs(s.custom_state->norm() - 1.0) > 1e-8)
            fail(ErrorKind::ValidationError, "initial_state.custom: state is not normalized");
        b.initial = StateVector(b.space, *s.custom_state);
    } else {
        // Every model orders its basis so that index 0 is all atoms in |1> (m = S) with empty cavities.
        b.initial = StateVector::basis(b.space, 0);
    }
    return b;
}

// --- probes ------------------------------------------------------------------------------

namespace {

// Raw per-state values: moments that average linearly over trajectories plus, for pure
// states, the nonlinear two-mode quantities.
struct ChannelPlan {
    std::vector<std::string> raw_names;
    Probe probe;
    std::function<std::vector<double>(const std::vector<double>& raw)> finish;
    std::vector<std::string> out_names;
};

struct FockOps {
    std::vector<SparseMat> number;
    std::vector<SparseMat> top;
};

FockOps fock_ops(const HilbertSpace& space) {
    FockOps f;
    for (std::size_t i = 0; i < space.num_factors(); ++i)
        if (const auto* fk = std::get_if<Fock>(&space.factor(i))) {
            const auto ops = boson_ops(space, i);
            f.number.push_back((ops.a_dag * ops.a).matrix());
            SparseMat top(fk->n_max + 1, fk->n_max + 1);
            top.insert(fk->n_max, fk->n_max) = 1.0;
            f.top.push_back(embed_factor(space, i, top).matrix());
        }
    return f;
}

ChannelPlan make_plan(const Scenario& s, const BuiltModel& b) {
    ChannelPlan plan;
    plan.out_names = s.observables;
    const auto fock = std::make_shared<FockOps>(fock_ops(b.space));
    const Vec psi0 = b.initial.amplitudes();

    auto photon_vals = [fock](auto&& expect) {
        double n = 0.0, top = 0.0;
        for (const auto& m : fock->number) n += expect(m);
        for (const auto& m : fock->top) top = std::max(top, expect(m));
        return std::make_pair(n, top);
    };

    if (is_spin_family(s.model)) {
        const auto ops = std::make_shared<SpinTriple>(collective_spin_ops(b.space, spin_factor_index(b.space)));
        plan.raw_names = {"m_x", "m_y", "m_z", "m_xx", "m_yy", "m_zz", "m_xy", "m_xz", "m_yz",
                          "fid2", "photon", "top"};
        plan.probe.names = plan.raw_names;
        plan.probe.pure = [ops, psi0, photon_vals](double, const Vec& psi) {
            auto v = spin_moments(*ops, psi).flatten();
            v.push_back(std::norm(psi0.dot(psi)));
            const auto [n, top] = photon_vals([&](const SparseMat& m) { return expectation(m, psi).real(); });
            v.push_back(n);
            v.push_back(top);
            return v;
        };
        plan.probe.mixed = [ops, psi0, photon_vals](double, const DenseMat& rho) {
            auto v = spin_moments(*ops, rho).flatten();
            v.push_back(psi0.dot(rho * psi0).real());
            const auto [n, top] = photon_vals([&](const SparseMat& m) { return expectation(m, rho).real(); });
            v.push_back(n);
            v.push_back(top);
            return v;
        };
        const double spin = b.spin;
        const auto names = plan.out_names;
        plan.finish = [spin, names](const std::vector<double>& raw) {
            const auto sq = squeezing_from_moments(SpinMoments::unflatten(raw.data()), spin);
            std::vector<double> out;
            for (const auto& n : names) {
                if (n == "xi2") out.push_back(sq.xi2);
                else if (n == "xi2_db") out.push_back(sq.xi2_db);
                else if (n == "fidelity") out.push_back(std::sqrt(std::clamp(raw[9], 0.0, 1.0)));
                else if (n == "mean_sz") out.push_back(raw[2]);
                else if (n == "photon_number") out.push_back(raw[10]);
                else if (n == "top_fock_pop") out.push_back(raw[11]);
            }
            return out;
        };
    } else {
        const auto ops = std::make_shared<PairSpinOps>(pair_spin_ops(b.space));
        const std::size_t cut = s.model == ModelKind::TwoCavityFull ? 2 : 1;
        const HilbertSpace space = b.space;
        plan.raw_names = {"mx_minus", "mxx_minus", "my_plus", "myy_plus", "mz_plus", "fid2", "photon", "top",
                          "entropy", "qfi11", "qfi12", "qfi22"};
        plan.probe.names = plan.raw_names;
        plan.probe.pure = [ops, psi0, photon_vals, cut, space](double, const Vec& psi) {
            const Vec vx = ops->minus.x.matrix() * psi;
            const Vec vy = ops->plus.y.matrix() * psi;
            std::vector<double> v = {psi.dot(vx).real(), vx.squaredNorm(), psi.dot(vy).real(), vy.squaredNorm(),
                                     expectation(ops->plus.z.matrix(), psi).real(), std::norm(psi0.dot(psi))};
            const auto [n, top] = photon_vals([&](const SparseMat& m) { return expectation(m, psi).real(); });
            v.push_back(n);
            v.push_back(top);
            v.push_back(entanglement_entropy(space, psi, cut));
            const auto q = qfi_matrix(*ops, psi);
            v.push_back(q.I[0][0]);
            v.push_back(q.I[0][1]);
            v.push_back(q.I[1][1]);
            return v;
        };
        plan.probe.mixed = [ops, psi0, photon_vals](double, const DenseMat& rho) {
            const SparseMat& x = ops->minus.x.matrix();
            const SparseMat& y = ops->plus.y.matrix();
            std::vector<double> v = {expectation(x, rho).real(), expectation(SparseMat(x * x), rho).real(),
                                     expectation(y, rho).real(), expectation(SparseMat(y * y), rho).real(),
                                     expectation(ops->plus.z.matrix(), rho).real(), psi0.dot(rho * psi0).real()};
            const auto [n, top] = photon_vals([&](const SparseMat& m) { return expectation(m, rho).real(); });
            v.push_back(n);
            v.push_back(top);
            for (int k = 0; k < 4; ++k) v.push_back(std::numeric_limits<double>::quiet_NaN());
            return v;
        };
        const auto names = plan.out_names;
        plan.finish = [names](const std::vector<double>& raw) {
            const double dp = (raw[1] - raw[0] * raw[0]) + (raw[3] - raw[2] * raw[2]) - raw[4];
            std::vector<double> out;
            for (const auto& n : names) {
                if (n == "delta_prime") out.push_back(dp);
                else if (n == "entropy_L") out.push_back(raw[8]);
                else if (n == "qfi_11") out.push_back(raw[9]);
                else if (n == "qfi_12") out.push_back(raw[10]);
                else if (n == "qfi_22") out.push_back(raw[11]);
                else if (n == "fidelity") out.push_back(std::sqrt(std::clamp(raw[5], 0.0, 1.0)));
                else if (n == "photon_number") out.push_back(raw[6]);
                else if (n == "top_fock_pop") out.push_back(raw[7]);
            }
            return out;
        };
    }
    return plan;
}

TimeSeries finish_series(const TimeSeries& raw, const ChannelPlan& plan) {
    TimeSeries out;
    out.times = raw.times;
    std::vector<std::vector<double>> cols(plan.out_names.size(), std::vector<double>(raw.times.size()));
    std::vector<double> row(plan.raw_names.size());
    for (std::size_t k = 0; k < raw.times.size(); ++k) {
        for (std::size_t c = 0; c < plan.raw_names.size(); ++c) row[c] = raw.channel(plan.raw_names[c])[k];
        const auto v = plan.finish(row);
        for (std::size_t c = 0; c < v.size(); ++c) cols[c][k] = v[c];
    }
    for (std::size_t c = 0; c < plan.out_names.size(); ++c) out.add(plan.out_names[c], std::move(cols[c]));
    return out;
}

// First index where the sampled curve turns upward.
std::size_t first_minimum(const std::vector<double>& v) {
    for (std::size_t i = 1; i + 1 < v.size(); ++i)
        if (std::isfinite(v[i]) && v[i] <= v[i - 1] && v[i] < v[i + 1]) return i;
    return v.empty() ? 0 : v.size() - 1;
}

Scenario comparator_scenario(const Scenario& s) {
    Scenario c = s;
    c.comparator.reset();
    c.sweep.reset();
    c.dissipation.reset();
    c.custom_state.reset();
    c.solver = SolverChoice::Schrodinger;
    c.observables = {"xi2", "fidelity"};
    if (*s.comparator == "lmg") {
        c.model = ModelKind::Lmg;
        c.spin = SpinModelParams{};
        c.spin.drive = s.drive;
        c.spin.atoms = s.drive.atoms;
        c.spin.coeff_mode = s.model == ModelKind::Intermediate ? s.coeff_mode : CoeffMode::Approx;
    } else {
        const auto rc = resolve_spin(s.spin);
        c.model = ModelKind::Oat;
        c.spin = SpinModelParams{};
        c.spin.atoms = s.spin.atoms;
        c.spin.c_x = rc.c_x;
    }
    // The comparator lives on the Dicke basis and needs no Fock resolution of the fast phases.
    c.integrator.dt.reset();
    return c;
}

} // namespace

// --- runs -------------------------------------------------------------------------------

RunRecord run_scenario(const Scenario& s) {
    const auto start = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.scenario_hash = s.hash();
    rec.seed = s.integrator.seed;
    const BuiltModel b = build_model(s);
    rec.coeffs = b.coeffs;
    rec.regime = b.regime;
    const ChannelPlan plan = make_plan(s, b);

    const bool has_jumps = std::any_of(b.channels.begin(), b.channels.end(), [](const Channel& c) { return c.rate > 0.0; });
    SolverChoice solver = s.solver;
    if (solver == SolverChoice::Auto)
        solver = !has_jumps ? SolverChoice::Schrodinger
                            : (b.space.dimension() <= s.limits.max_dense_dim ? SolverChoice::Lindblad : SolverChoice::Mcwf);
    if (solver == SolverChoice::Schrodinger && has_jumps)
        fail(ErrorKind::ValidationError, "integrator.solver: schrodinger cannot include dissipation");

    switch (solver) {
        case SolverChoice::Schrodinger:
        case SolverChoice::Auto: {
            rec.solver = "schrodinger";
            const auto ev = evolve_schrodinger(b.hamiltonian, b.initial, s.integrator, plan.probe);
            rec.series = finish_series(ev.series, plan);
            rec.series.add("norm_err", ev.series.channel("norm_err"));
            rec.series.metadata["subspace_dim"] = std::to_string(ev.stats.subspace_dim);
            rec.final_state = ev.final_state;
            rec.series.metadata["steps"] = std::to_string(ev.stats.steps);
            break;
        }
        case SolverChoice::Lindblad: {
            rec.solver = "lindblad";
            const auto rho0 = DensityMatrix::from_pure(b.initial, s.limits);
            const auto ev = evolve_lindblad(b.hamiltonian, b.channels, rho0, s.integrator, plan.probe, s.limits);
            rec.series = finish_series(ev.series, plan);
            rec.series.add("trace_err", ev.series.channel("trace_err"));
            const auto& h = ev.series.channel("herm_err");
            rec.series.metadata["max_herm_err"] = short_num(*std::max_element(h.begin(), h.end()));
            rec.series.metadata["blocks"] = std::to_string(ev.blocks);
            rec.final_density = ev.final_state;
            rec.series.metadata["steps"] = std::to_string(ev.stats.steps);
            break;
        }
        case SolverChoice::Mcwf: {
            rec.solver = "mcwf";
            const auto mc = evolve_mcwf(b.hamiltonian, b.channels, b.initial, s.integrator, plan.probe);
            rec.series = mc.derive(plan.out_names, [&](double, const std::vector<double>& mean) { return plan.finish(mean); });
            std::size_t jumps = 0;
            for (auto j : mc.jumps) jumps += j;
            rec.series.metadata["n_traj"] = std::to_string(s.integrator.n_traj);
            rec.series.metadata["total_jumps"] = std::to_string(jumps);
            rec.series.metadata["integrated_paths"] = std::to_string(mc.integrated_paths);
            break;
        }
    }
    rec.series.metadata["model"] = to_string(s.model);
    rec.series.metadata["dimension"] = std::to_string(b.space.dimension());
    rec.summary = squeezing_summary(rec.series);

    if (s.comparator) {
        const Scenario cs = comparator_scenario(s);
        const RunRecord ref = run_scenario(cs);
        rec.series.add("xi2_ref", ref.series.channel("xi2"));
        rec.series.add("fidelity_ref", ref.series.channel("fidelity"));
        rec.reference_summary = ref.summary;
        if (rec.series.has("xi2")) {
            const auto& a = rec.series.channel("xi2");
            const auto& r = ref.series.channel("xi2");
            const std::size_t upto = std::max(first_minimum(a), first_minimum(r));
            double gap = 0.0;
            for (std::size_t k = 0; k <= upto && k < a.size(); ++k)
                if (std::isfinite(a[k]) && std::isfinite(r[k])) gap = std::max(gap, std::abs(a[k] - r[k]));
            rec.max_xi2_gap = gap;
        }
    }

    if (rec.series.has("top_fock_pop")) {
        const auto& top = rec.series.channel("top_fock_pop");
        double worst = 0.0;
        for (double v : top)
            if (std::isfinite(v)) worst = std::max(worst, v);
        rec.series.metadata["max_top_fock_pop"] = short_num(worst);
        if (worst > 1e-4)
            rec.warnings.push_back("top Fock population reached " + short_num(worst) + "; raise n_max");
    }
    if (rec.regime) {
        if (!rec.regime->large_detuning_ok)
            rec.warnings.push_back("large-detuning ratio " + short_num(rec.regime->large_detuning_ratio) +
                                   " below threshold");
        if (!rec.regime->virtual_cavity_ok)
            rec.warnings.push_back("virtual-cavity ratio " + short_num(rec.regime->virtual_cavity_ratio) +
                                   " below threshold");
    }
    rec.series.metadata["scenario_hash"] = rec.scenario_hash;
    rec.series.metadata["seed"] = std::to_string(rec.seed);
    rec.series.metadata["code_version"] = TACTSIM_VERSION;
    rec.series.validate();
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

Scenario sweep_point(const Scenario& s, double value) {
    if (!s.sweep) fail(ErrorKind::ValidationError, "scenario has no sweep axis");
    Scenario p = s;
    p.sweep.reset();
    const std::string& axis = s.sweep->name;
    if (axis == "N") {
        const int n = static_cast<int>(value);
        switch (s.model) {
            case ModelKind::Full:
            case ModelKind::Intermediate: p.drive.atoms = n; break;
            case ModelKind::Lmg:
            case ModelKind::Oat:
                p.spin.atoms = n;
                if (p.spin.drive) p.spin.drive->atoms = n;
                break;
            case ModelKind::Tmss: p.tmss.spin_left = p.tmss.spin_right = 0.5 * n; break;
            case ModelKind::TwoCavityFull: p.two_cavity.spin_left = p.two_cavity.spin_right = 0.5 * n; break;
        }
    } else if (axis == "J") {
        if (s.model == ModelKind::Tmss) p.tmss.J = value;
        else p.two_cavity.J_tilde = value * std::sqrt(p.two_cavity.delta_left * p.two_cavity.gamma_right);
    } else {
        if (s.model == ModelKind::Tmss) p.tmss.spin_right = value;
        else p.two_cavity.spin_right = value;
    }
    return p;
}

SweepResult run_sweep(const Scenario& s, int threads) {
    if (!s.sweep) fail(ErrorKind::ValidationError, "scenario has no sweep axis");
    SweepResult res;
    res.axis = s.sweep->name;
    res.scenario_hash = s.hash();
    res.points.resize(s.sweep->values.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < res.points.size(); i = next++) {
            auto& pt = res.points[i];
            pt.value = s.sweep->values[i];
            try {
                pt.record = run_scenario(sweep_point(s, pt.value));
            } catch (const std::exception& e) {
                pt.error = e.what();
            }
        }
    };
    const int n = std::max(1, std::min<int>(threads, static_cast<int>(res.points.size())));
    std::vector<std::thread> pool;
    for (int t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    return res;
}

// --- emission ----------------------------------------------------------------------------

namespace {

std::string fmt17(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

json num_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

json opt_json(const std::optional<double>& x) { return x ? num_or_null(*x) : json(nullptr); }

json summary_json(const SqueezingSummary& s) {
    return {{"xi2_min", opt_json(s.xi2_min)},
            {"t_at_min", opt_json(s.t_at_min)},
            {"xi2_min_db", opt_json(s.xi2_min_db)},
            {"delta_prime_min", opt_json(s.delta_prime_min)},
            {"t_at_dmin", opt_json(s.t_at_dmin)}};
}

json coeffs_json(const EffectiveCoeffs& c) {
    return {{"A", c.A},
            {"B", c.B},
            {"c_z", c.c_z},
            {"c_z_osc", c.c_z_osc},
            {"delta", c.delta},
            {"gamma", c.gamma},
            {"delta_shifted", c.delta_shifted},
            {"gamma_shifted", c.gamma_shifted},
            {"c_x", c.c_x},
            {"c_y", c.c_y},
            {"chi", c.chi},
            {"mode", mode_name(c.mode)},
            {"c_x_approx", c.c_x_approx},
            {"c_y_approx", c.c_y_approx},
            {"c_x_exact", c.c_x_exact},
            {"c_y_exact", c.c_y_exact}};
}

json regime_json(const RegimeReport& r) {
    return {{"threshold", r.threshold},
            {"large_detuning_ratio", num_or_null(r.large_detuning_ratio)},
            {"large_detuning_ok", r.large_detuning_ok},
            {"virtual_cavity_ratio", num_or_null(r.virtual_cavity_ratio)},
            {"virtual_cavity_ok", r.virtual_cavity_ok},
            {"cross_detuning_ratio", num_or_null(r.cross_detuning_ratio)},
            {"cross_detuning_ok", r.cross_detuning_ok}};
}

json meta_json(const RunRecord& r) {
    json j = {{"scenario_hash", r.scenario_hash},
              {"seed", r.seed},
              {"wall_time_s", r.wall_time},
              {"solver", r.solver},
              {"code_version", TACTSIM_VERSION},
              {"summary", summary_json(r.summary)},
              {"warnings", r.warnings},
              {"metadata", r.series.metadata}};
    if (r.reference_summary) j["reference_summary"] = summary_json(*r.reference_summary);
    if (r.max_xi2_gap) j["max_xi2_gap"] = *r.max_xi2_gap;
    if (r.coeffs) j["coeffs"] = coeffs_json(*r.coeffs);
    if (r.regime) j["regime"] = regime_json(*r.regime);
    return j;
}

std::filesystem::path sidecar(const std::filesystem::path& p) { return p.string() + ".meta.json"; }

} // namespace

json RunRecord::to_json() const {
    json j = meta_json(*this);
    json ch = json::object(), err = json::object();
    for (std::size_t c = 0; c < series.names.size(); ++c) {
        json v = json::array();
        for (double x : series.values[c]) v.push_back(num_or_null(x));
        ch[series.names[c]] = v;
        if (!series.std_errors[c].empty()) {
            json e = json::array();
            for (double x : series.std_errors[c]) e.push_back(num_or_null(x));
            err[series.names[c]] = e;
        }
    }
    j["times"] = series.times;
    j["channels"] = ch;
    if (!err.empty()) j["std_errors"] = err;
    return j;
}

json SweepResult::to_json() const {
    json pts = json::array();
    for (const auto& p : points) {
        json j = {{"value", p.value}};
        if (p.record) j["record"] = p.record->to_json();
        else j["error"] = p.error;
        pts.push_back(j);
    }
    return {{"axis", axis}, {"scenario_hash", scenario_hash}, {"points", pts}};
}

std::string format_csv(const TimeSeries& ts) {
    std::string out = "t";
    for (std::size_t c = 0; c < ts.names.size(); ++c) {
        out += "," + ts.names[c];
        if (!ts.std_errors[c].empty()) out += "," + ts.names[c] + "_se";
    }
    out += "\n";
    for (std::size_t k = 0; k < ts.times.size(); ++k) {
        out += fmt17(ts.times[k]);
        for (std::size_t c = 0; c < ts.names.size(); ++c) {
            out += "," + fmt17(ts.values[c][k]);
            if (!ts.std_errors[c].empty()) out += "," + fmt17(ts.std_errors[c][k]);
        }
        out += "\n";
    }
    return out;
}

void write_atomic(const std::filesystem::path& path, const std::string& content) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::IoError, "cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp, ec);
            fail(ErrorKind::IoError, "short write to " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        fail(ErrorKind::IoError, "cannot move output into place at " + path.string());
    }
}

void emit(const RunRecord& r, OutputFormat format, const std::filesystem::path& path) {
    if (format == OutputFormat::Json) {
        write_atomic(path, r.to_json().dump(2) + "\n");
        return;
    }
    write_atomic(path, format_csv(r.series));
    write_atomic(sidecar(path), meta_json(r).dump(2) + "\n");
}

void emit(const SweepResult& r, OutputFormat format, const std::filesystem::path& path) {
    if (format == OutputFormat::Json) {
        write_atomic(path, r.to_json().dump(2) + "\n");
        return;
    }
    std::string out = r.axis + ",status,xi2_min,t_at_min,xi2_min_db,delta_prime_min,t_at_dmin,xi2_min_ref,t_at_min_ref,"
                               "max_xi2_gap\n";
    auto opt = [](const std::optional<double>& x) { return x ? fmt17(*x) : std::string("nan"); };
    for (const auto& p : r.points) {
        out += fmt17(p.value);
        if (!p.record) {
            out += ",failed,nan,nan,nan,nan,nan,nan,nan,nan\n";
            continue;
        }
        const auto& s = p.record->summary;
        out += ",ok," + opt(s.xi2_min) + "," + opt(s.t_at_min) + "," + opt(s.xi2_min_db) + "," +
               opt(s.delta_prime_min) + "," + opt(s.t_at_dmin);
        if (p.record->reference_summary)
            out += "," + opt(p.record->reference_summary->xi2_min) + "," + opt(p.record->reference_summary->t_at_min);
        else
            out += ",nan,nan";
        out += "," + opt(p.record->max_xi2_gap) + "\n";
    }
    write_atomic(path, out);
    json meta = {{"axis", r.axis}, {"scenario_hash", r.scenario_hash}, {"code_version", TACTSIM_VERSION}};
    json errors = json::object();
    for (const auto& p : r.points)
        if (!p.record) errors[fmt17(p.value)] = p.error;
    meta["errors"] = errors;
    write_atomic(sidecar(path), meta.dump(2) + "\n");
}

void write_snapshot(const RunRecord& r, const std::filesystem::path& path) {
    const cplx* data = nullptr;
    std::size_t count = 0;
    const HilbertSpace* space = nullptr;
    if (r.final_state) {
        data = r.final_state->amplitudes().data();
        count = static_cast<std::size_t>(r.final_state->amplitudes().size());
        space = &r.final_state->space();
    } else if (r.final_density) {
        data = r.final_density->matrix().data();
        count = static_cast<std::size_t>(r.final_density->matrix().size());
        space = &r.final_density->space();
    } else {
        fail(ErrorKind::IoError, "run kept no final state to snapshot (trajectory solver)");
    }
    std::string bytes;
    bytes.reserve(count * 16);
    auto put = [&](double x) {
        std::uint64_t u;
        std::memcpy(&u, &x, sizeof u);
        for (int b = 0; b < 8; ++b) bytes += static_cast<char>((u >> (8 * b)) & 0xff);
    };
    for (std::size_t i = 0; i < count; ++i) {
        put(data[i].real());
        put(data[i].imag());
    }
    json factors = json::array();
    for (const auto& f : space->factors()) factors.push_back(describe(f));
    const json meta = {{"kind", r.final_state ? "state_vector" : "density_matrix"},
                       {"dimension", space->dimension()},
                       {"factors", factors},
                       {"time", r.series.times.empty() ? 0.0 : r.series.times.back()},
                       {"scenario_hash", r.scenario_hash},
                       {"encoding", "little-endian float64 (re, im) pairs, row-major"}};
    write_atomic(path, bytes);
    write_atomic(path.string() + ".json", meta.dump(2) + "\n");
}

json coeffs_report(const Scenario& s) {
    const DriveParams* drive = nullptr;
    CoeffMode mode = CoeffMode::Approx;
    if (s.model == ModelKind::Full || s.model == ModelKind::Intermediate) {
        drive = &s.drive;
        mode = s.model == ModelKind::Intermediate ? s.coeff_mode : CoeffMode::Approx;
    } else if (s.spin.drive) {
        drive = &*s.spin.drive;
        mode = s.spin.coeff_mode;
    }
    if (!drive) fail(ErrorKind::ValidationError, "params: coeffs needs a drive parameter set");
    const auto c = effective_coeffs(*drive, mode);
    const auto r = validate_regime(*drive, c);
    json j = {{"coeffs", coeffs_json(c)}, {"regime", regime_json(r)}};
    if (r.large_detuning_ok && r.virtual_cavity_ok) return j;
    j["warnings"] = json::array({"parameters fall outside the adiabatic-elimination regime"});
    return j;
}

ExperimentalTargets parse_targets(const std::string& text, const std::string& origin) {
    const json j = parse_strict(text, origin);
    Reader r(j, "");
    ExperimentalTargets t;
    if (!r.has("seed")) invalid("seed", "required field missing");
    Reader d(r.raw("seed"), "seed");
    t.seed = read_drive(d, true);
    d.finish();
    t.detuning_split = r.num("detuning_split", t.detuning_split);
    t.chi = r.opt_num("chi");
    if (r.has("frozen")) {
        const json& f = r.raw("frozen");
        if (!f.is_array()) invalid("frozen", "expected an array of parameter names");
        for (const auto& n : f) {
            if (!n.is_string()) invalid("frozen", "parameter names must be strings");
            t.frozen.push_back(n.get<std::string>());
        }
    }
    t.max_iterations = r.integer("max_iterations", t.max_iterations);
    t.tolerance = r.num("tolerance", t.tolerance);
    r.finish();
    return t;
}

json solution_json(const ExperimentalSolution& sol) {
    json res = json::object();
    for (const auto& [n, v] : sol.residuals) res[n] = v;
    return {{"params", drive_json(sol.params)},
            {"residuals", res},
            {"max_residual", sol.max_residual},
            {"iterations", sol.iterations},
            {"coeffs", coeffs_json(sol.coeffs)},
            {"regime", regime_json(sol.regime)}};
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::ParseError:
        case ErrorKind::ValidationError:
        case ErrorKind::InconsistentParams:
        case ErrorKind::BasisMismatch:
        case ErrorKind::BadFactor:
        case ErrorKind::RateNegative: return 1;
        case ErrorKind::IoError: return 3;
        default: return 2;
    }
}

} // namespace tactsim
