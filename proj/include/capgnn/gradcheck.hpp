#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "capgnn/matrix.hpp"
#include "capgnn/rng.hpp"
#include "capgnn/tape.hpp"

namespace capgnn {

struct GradcheckOptions {
    std::size_t size = 16;       // vertices of the synthetic graph, at most 64
    std::uint64_t seed = 0;
    Real step = 1e-5;            // central-difference step
    Real threshold = 1e-3;
    std::size_t max_coords = 48; // per parameter group; larger groups are sampled
};

struct GradcheckResult {
    std::string suite;
    std::string group;
    Real max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // probes that straddled a relu kink
    Real threshold = 0.0;

    bool pass() const noexcept { return checked > 0 && max_rel_error < threshold; }
};

struct GradcheckReport {
    std::vector<GradcheckResult> results;

    bool ok() const;
    /// "suite/group" of every failing result.
    std::vector<std::string> failures() const;
    std::string format() const;
};

/// |a - b| / max(|a|, |b|, 1e-6).
Real relative_error(Real a, Real b);

/// Scalar objective of a list of input matrices, evaluated off the gradient path.
using ValueFn = std::function<Real(const std::vector<Matrix>&)>;
/// Scalar objective recorded on a tape; `inputs` are leaves.
using TapeFn = std::function<Var(Tape&, std::span<const Var> inputs)>;

/// Compares `analytic[i]` against central differences of `f` for every input group.
std::vector<GradcheckResult> compare_with_finite_differences(const std::string& suite,
                                                             const std::vector<std::string>& names,
                                                             const ValueFn& f, const std::vector<Matrix>& inputs,
                                                             const std::vector<Matrix>& analytic,
                                                             const GradcheckOptions& options, SeededRng& rng);

/// Tape gradients of `f` checked against central differences of the same function.
std::vector<GradcheckResult> check_tape_gradients(const std::string& suite, const std::vector<std::string>& names,
                                                  const TapeFn& f, const std::vector<Matrix>& inputs,
                                                  const GradcheckOptions& options, SeededRng& rng);

/// Every differentiable op plus the full CAPGCN and CAPGAT objectives (dropout off,
/// contrastive targets frozen) on a synthetic graph of options.size vertices.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

}  // namespace capgnn
