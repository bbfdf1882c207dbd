"""
Direct image-space pose fitting, the optimization baseline the feedback loop
is compared against.

The pose minimizing ``|observed - synthesize(pose)|²`` is searched inside the
crop cube, either with scipy's L-BFGS-B or with a particle swarm.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.optimize

from src.modules.depth_scene import render_hand
from src.modules.geometry import compute_crop_transform, normalize_depth

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class FitProblem:
    """
    observed: normalized crop.
    synthesize: pose vector -> crop of the same shape.
    vjp: (pose, image-space gradient) -> pose gradient; finite differences
        with step ``fd_step`` (mm) are used when it is None.
    """
    observed: np.ndarray
    synthesize: object
    initial: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    vjp: object = None
    max_evaluations: int = 200
    memory: int = 10
    fd_step: float = 0.5

    def __post_init__(self):
        self.observed = np.asarray(self.observed, np.float64)
        self.initial = np.asarray(self.initial, np.float64)
        self.lower = np.broadcast_to(np.asarray(self.lower, np.float64), self.initial.shape).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, np.float64), self.initial.shape).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds exceed upper bounds")
        if np.any(self.initial < self.lower) or np.any(self.initial > self.upper):
            raise ValueError("initial pose lies outside the box bounds")

    def objective(self, pose):
        residual = self.synthesize(pose) - self.observed
        return float(np.sum(residual ** 2))

    def objective_and_gradient(self, pose):
        synth = self.synthesize(pose)
        residual = synth - self.observed
        value = float(np.sum(residual ** 2))
        if self.vjp is not None:
            return value, np.asarray(self.vjp(pose, 2.0 * residual), np.float64).ravel()
        return value, self._fd_gradient(pose)

    def _fd_gradient(self, pose):
        grad = np.zeros_like(pose)
        for k in range(pose.size):
            hi = pose.copy()
            lo = pose.copy()
            hi[k] = min(pose[k] + self.fd_step, self.upper[k])
            lo[k] = max(pose[k] - self.fd_step, self.lower[k])
            if hi[k] > lo[k]:
                grad[k] = (self.objective(hi) - self.objective(lo)) / (hi[k] - lo[k])
        return grad


@dataclass
class FitResult:
    pose: np.ndarray
    trace: list = field(default_factory=list)
    evaluations: int = 0
    success: bool = True
    message: str = ""

    @property
    def objective(self):
        return self.trace[-1] if self.trace else None


def direct_fit(problem):
    """
    Box-constrained L-BFGS-B on the image discrepancy.

    ``trace`` holds the objective at the start and after every accepted
    step. When the optimizer stops abnormally the best pose evaluated so far
    is returned with ``success`` False.
    """
    memo = {}
    best = {"value": np.inf, "pose": problem.initial.copy()}

    def fun(x):
        key = x.tobytes()
        if key not in memo:
            value, grad = problem.objective_and_gradient(x)
            memo[key] = (value, grad)
            if value < best["value"]:
                best["value"], best["pose"] = value, x.copy()
        return memo[key]

    trace = [fun(problem.initial.copy())[0]]

    def accept(xk):
        trace.append(fun(np.asarray(xk, np.float64))[0])

    result = scipy.optimize.minimize(
        fun, problem.initial.copy(), jac=True, method="L-BFGS-B",
        bounds=list(zip(problem.lower, problem.upper)), callback=accept,
        options={"maxcor": problem.memory, "maxfun": problem.max_evaluations,
                 "maxiter": problem.max_evaluations})
    message = str(result.message)
    if result.success:
        pose = np.asarray(result.x, np.float64)
    else:
        logger.warning(f"L-BFGS-B stopped early ({message}); returning the best pose found")
        pose = best["pose"]
    pose = np.clip(pose, problem.lower, problem.upper)
    return FitResult(pose, trace, len(memo), bool(result.success), message)


@dataclass(frozen=True)
class SwarmConfig:
    particles: int = 30
    generations: int = 50
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    spread: float = 0.1
    velocity_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.particles < 1 or self.generations < 0:
            raise ValueError("a swarm needs at least one particle and a non-negative generation count")


def pso_fit(problem, swarm=SwarmConfig()):
    """
    Elitist particle swarm inside the box bounds.

    Particle 0 starts at the initial pose, the others around it with a spread
    of ``swarm.spread`` times the box width. ``trace`` holds the global best
    objective after every generation, starting with the initial swarm.
    """
    rng = np.random.default_rng(swarm.seed)
    lo, hi = problem.lower, problem.upper
    width = hi - lo
    dim = problem.initial.size
    x = np.clip(problem.initial + rng.normal(0.0, 1.0, (swarm.particles, dim)) * swarm.spread * width, lo, hi)
    x[0] = problem.initial
    v = rng.uniform(-1.0, 1.0, (swarm.particles, dim)) * swarm.velocity_scale * width
    f = np.array([problem.objective(p) for p in x])
    best_x, best_f = x.copy(), f.copy()
    g = int(np.argmin(best_f))
    g_x, g_f = best_x[g].copy(), float(best_f[g])
    trace = [g_f]
    evaluations = swarm.particles
    for generation in range(swarm.generations):
        r_p = rng.uniform(size=x.shape)
        r_g = rng.uniform(size=x.shape)
        v = swarm.inertia * v + swarm.cognitive * r_p * (best_x - x) + swarm.social * r_g * (g_x - x)
        x = np.clip(x + v, lo, hi)
        f = np.array([problem.objective(p) for p in x])
        evaluations += swarm.particles
        improved = f < best_f
        best_x[improved] = x[improved]
        best_f[improved] = f[improved]
        g = int(np.argmin(best_f))
        if best_f[g] < g_f:
            g_x, g_f = best_x[g].copy(), float(best_f[g])
        trace.append(g_f)
        logger.debug(f"pso generation {generation + 1}: best objective {g_f:.6g}")
    return FitResult(g_x, trace, evaluations, True, "generation budget reached")


def synthesizer_problem(observed, synthesizer, initial, max_evaluations=200):
    """Fit problem over crop-relative joints with the learned synthesizer and its input gradient."""
    initial = np.asarray(initial, np.float64).ravel()
    c = synthesizer.cube.depth
    J = initial.size // 3

    def synthesize(pose):
        return synthesizer(pose.reshape(J, 3))

    def vjp(pose, grad_image):
        return synthesizer.input_gradient(pose.reshape(1, J, 3), grad_image[None])[0]

    return FitProblem(observed, synthesize, np.clip(initial, -c, c), -c, c, vjp=vjp,
                      max_evaluations=max_evaluations)


def renderer_problem(observed, geometry, center, cube, cam, initial, size, max_evaluations=200, fd_step=0.5):
    """
    Fit problem with the analytic hand renderer in place of the synthesizer.

    The crop is rendered directly with the crop camera, so ``observed`` must
    come from ``render_crop`` for the comparison to be exact.
    """
    initial = np.asarray(initial, np.float64).ravel()
    J = initial.size // 3

    def synthesize(pose):
        return render_crop(center + pose.reshape(J, 3), geometry, center, cube, cam, size)

    return FitProblem(observed, synthesize, np.clip(initial, -cube.depth, cube.depth), -cube.depth, cube.depth,
                      max_evaluations=max_evaluations, fd_step=fd_step)


def render_crop(hand_pose, geometry, center, cube, cam, size):
    """Normalized hand crop rendered at crop resolution."""
    ct = compute_crop_transform(center, cube, cam, size)
    d = render_hand(hand_pose, geometry, ct.crop_camera(cam))
    return normalize_depth(d.depth, ct.center[2], ct.half_range, d.valid)
