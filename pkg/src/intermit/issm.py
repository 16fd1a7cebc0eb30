"""Innovation state space model components and their composition.

Every component contributes a block to the latent state: a constant
transition matrix, a selector vector a_t reading the state into the
signal, and a unit innovation shape per learnable strength.  A composite
model stacks the blocks; the transition becomes block diagonal and the
per-step vectors are concatenations.

Calendar handling is deliberately dumb: seasonal components consume an
integer column of atomic factor indices supplied by the data layer and
never parse dates themselves.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

DEFAULT_STRENGTH_BOUNDS = (1e-3, 1.0)


@dataclass(frozen=True)
class SeasonalityPattern:
    """A periodic pattern of atomic factors with optional grouping.

    ``grouping`` maps atomic factor index -> group index (contiguous from
    0); identity when omitted.  ``cycle_length`` is the number of time
    steps in one full cycle and is used to convert usage counts observed
    over a concrete training range into per-cycle budgets.  Explicit
    ``usage_counts`` (one per group) override the computed ones.
    """

    num_atomic: int
    cycle_length: int
    grouping: np.ndarray | None = None
    usage_counts: np.ndarray | None = None
    name: str = "seasonal"

    def __post_init__(self):
        if self.num_atomic < 1:
            raise ConfigurationError("pattern needs at least one atomic factor")
        if self.cycle_length < 1:
            raise ConfigurationError("cycle_length must be positive")
        if self.grouping is not None:
            grouping = np.asarray(self.grouping, dtype=np.int64)
            object.__setattr__(self, "grouping", grouping)
            if grouping.shape != (self.num_atomic,):
                raise ConfigurationError(
                    "grouping must map every atomic factor exactly once")
            groups = np.unique(grouping)
            if groups.min() != 0 or not np.array_equal(
                    groups, np.arange(groups.size)):
                raise ConfigurationError(
                    "group indices must be contiguous starting at 0")

    @property
    def group_of(self):
        if self.grouping is None:
            return np.arange(self.num_atomic)
        return self.grouping

    @property
    def num_groups(self):
        return int(self.group_of.max()) + 1


@dataclass(frozen=True)
class LevelComponent:
    """Single random-walk level; strength alpha scales its drift."""

    strength_bounds: tuple = (DEFAULT_STRENGTH_BOUNDS,)
    name: str = "level"

    kind = "level"
    latent_dim = 1
    strength_names = ("alpha",)
    needs_calendar = False
    # sigma0 slots: (slot count, coords covered by each slot)
    sigma0_slots = ((0,),)

    def transition(self):
        return np.array([[1.0]])

    def selectors(self, n, cal=None):
        return np.ones((n, 1))

    def innovation_shapes(self, n, cal=None, train_len=None):
        return np.ones((1, n, 1))


@dataclass(frozen=True)
class LevelTrendComponent:
    """Level plus slope; separate strengths, optional fixed damping.

    A scalar damping factor replaces the slope 1s in the transition and
    the selector; a pair damps level and slope independently.  Damping
    hyperparameters are fixed, never learned.
    """

    damping: tuple = (1.0, 1.0)
    strength_bounds: tuple = (DEFAULT_STRENGTH_BOUNDS, DEFAULT_STRENGTH_BOUNDS)
    name: str = "level_trend"

    kind = "level_trend"
    latent_dim = 2
    strength_names = ("alpha", "beta")
    needs_calendar = False
    sigma0_slots = ((0,), (1,))

    def __post_init__(self):
        dl, ds = self.damping
        if not (0.0 < dl <= 1.0 and 0.0 < ds <= 1.0):
            raise ConfigurationError("damping factors must lie in (0, 1]")

    def transition(self):
        dl, ds = self.damping
        return np.array([[dl, ds], [0.0, ds]])

    def selectors(self, n, cal=None):
        dl, ds = self.damping
        return np.tile([dl, ds], (n, 1))

    def innovation_shapes(self, n, cal=None, train_len=None):
        shapes = np.zeros((2, n, 2))
        shapes[0, :, 0] = 1.0
        shapes[1, :, 1] = 1.0
        return shapes


@dataclass(frozen=True)
class SeasonalityComponent:
    """Grouped seasonal factors; one latent coordinate per group.

    At each step exactly one group factor is read (a_t is an indicator),
    and that factor receives 1/N_h of the innovation, spending its unit
    per-cycle budget uniformly over its N_h usage slots.
    """

    pattern: SeasonalityPattern = field(default_factory=lambda: SeasonalityPattern(7, 7))
    strength_bounds: tuple = (DEFAULT_STRENGTH_BOUNDS,)
    name: str = "seasonal"

    kind = "seasonality"
    strength_names = ("gamma",)
    needs_calendar = True

    @property
    def latent_dim(self):
        return self.pattern.num_groups

    @property
    def sigma0_slots(self):
        # One shared deviation for all group factors.
        return (tuple(range(self.latent_dim)),)

    def transition(self):
        return np.eye(self.latent_dim)

    def _groups_at(self, cal):
        cal = np.asarray(cal, dtype=np.int64)
        if cal.min() < 0 or cal.max() >= self.pattern.num_atomic:
            raise ConfigurationError(
                f"calendar indices for {self.name!r} outside "
                f"[0, {self.pattern.num_atomic})")
        return self.pattern.group_of[cal]

    def selectors(self, n, cal=None):
        if cal is None or len(cal) < n:
            raise ConfigurationError(
                f"seasonal component {self.name!r} needs a calendar column")
        sel = np.zeros((n, self.latent_dim))
        sel[np.arange(n), self._groups_at(cal[:n])] = 1.0
        return sel

    def usage_counts(self, cal, train_len=None):
        """Per-cycle usage count of each group, from the training range."""
        if self.pattern.usage_counts is not None:
            counts = np.asarray(self.pattern.usage_counts, dtype=float)
            if counts.shape != (self.latent_dim,):
                raise ConfigurationError("usage_counts must have one entry per group")
            return counts
        if train_len is None:
            train_len = len(cal)
        train_len = min(train_len, len(cal))
        groups = self._groups_at(cal[:train_len])
        counts = np.bincount(groups, minlength=self.latent_dim).astype(float)
        counts *= self.pattern.cycle_length / max(train_len, 1)
        counts[counts == 0.0] = 1.0
        return counts

    def innovation_shapes(self, n, cal=None, train_len=None):
        sel = self.selectors(n, cal)
        counts = self.usage_counts(cal, train_len)
        return (sel / counts)[None, :, :]


def make_level(alpha_bounds=None):
    """Level-only component."""
    return LevelComponent(strength_bounds=(alpha_bounds or DEFAULT_STRENGTH_BOUNDS,))


def make_level_trend(alpha_bounds=None, beta_bounds=None, damping=None):
    """Level-and-slope component with optional fixed damping (< 1)."""
    if damping is None:
        damping = (1.0, 1.0)
    elif np.isscalar(damping):
        damping = (1.0, float(damping))
    else:
        damping = (float(damping[0]), float(damping[1]))
    return LevelTrendComponent(
        damping=damping,
        strength_bounds=(alpha_bounds or DEFAULT_STRENGTH_BOUNDS,
                         beta_bounds or DEFAULT_STRENGTH_BOUNDS),
    )


def make_seasonality(pattern, gamma_bounds=None, name=None):
    """Seasonal component from a pattern description."""
    return SeasonalityComponent(
        pattern=pattern,
        strength_bounds=(gamma_bounds or DEFAULT_STRENGTH_BOUNDS,),
        name=name or pattern.name,
    )


@dataclass
class Coefficients:
    """Assembled time-indexed coefficients of a composite model.

    ``gtilde`` holds one unit innovation shape per strength slot;
    ``g(strengths)`` contracts them into the model's innovation vectors.
    """

    F: np.ndarray             # (d, d)
    Finv: np.ndarray          # (d, d)
    a: np.ndarray             # (n, d)
    gtilde: np.ndarray        # (n_strengths, n, d)

    def g(self, strengths):
        return np.einsum("k,kti->ti", np.asarray(strengths, dtype=float),
                         self.gtilde)


class CompositeIssm:
    """Block-wise composition of ISSM components.

    Immutable after construction; coefficient generation is pure, so a
    single instance can be shared across threads and stages.
    """

    def __init__(self, components):
        components = list(components)
        if not components:
            raise ConfigurationError("cannot compose an empty component list")
        names = []
        renamed = []
        for comp in components:
            base = comp.name
            name = base
            i = 1
            while name in names:
                name = f"{base}_{i}"
                i += 1
            names.append(name)
            if name != base:
                import dataclasses

                comp = dataclasses.replace(comp, name=name)
            renamed.append(comp)
        self.components = tuple(renamed)
        self.total_dim = sum(c.latent_dim for c in self.components)
        dims = [c.latent_dim for c in self.components]
        self.state_offsets = np.concatenate([[0], np.cumsum(dims)])
        self.strength_names = tuple(
            f"{c.name}.{s}" for c in self.components for s in c.strength_names)
        self.strength_bounds = tuple(
            b for c in self.components for b in c.strength_bounds)
        self.n_strengths = len(self.strength_names)
        # sigma0 slots with coords shifted to composite coordinates
        slots = []
        for c, off in zip(self.components, self.state_offsets):
            for coords in c.sigma0_slots:
                slots.append(tuple(off + j for j in coords))
        self.sigma0_slots = tuple(slots)

    @property
    def calendar_names(self):
        return tuple(c.name for c in self.components if c.needs_calendar)

    def transition(self):
        F = np.zeros((self.total_dim, self.total_dim))
        for c, off in zip(self.components, self.state_offsets):
            k = c.latent_dim
            F[off:off + k, off:off + k] = c.transition()
        return F

    def coefficients(self, length, calendar=None, train_len=None):
        """Assemble (F, a, gtilde) for ``length`` steps.

        ``calendar`` maps seasonal component names to integer columns of
        atomic factor indices covering the whole range; ``train_len``
        bounds the slice used for usage-count estimation.
        """
        calendar = calendar or {}
        F = self.transition()
        a_blocks = []
        shape_blocks = []
        for c in self.components:
            cal = calendar.get(c.name) if c.needs_calendar else None
            if c.needs_calendar and cal is None:
                raise ConfigurationError(
                    f"missing calendar column for seasonal component {c.name!r}")
            a_blocks.append(c.selectors(length, cal))
            shape_blocks.append(c.innovation_shapes(length, cal, train_len))
        a = np.concatenate(a_blocks, axis=1)
        gtilde = np.zeros((self.n_strengths, length, self.total_dim))
        row = 0
        for blk, c, off in zip(shape_blocks, self.components, self.state_offsets):
            k = c.latent_dim
            gtilde[row:row + blk.shape[0], :, off:off + k] = blk
            row += blk.shape[0]
        return Coefficients(F=F, Finv=np.linalg.inv(F), a=a, gtilde=gtilde)

    def coefficients_at(self, t, strengths, x_t=None, weights=None,
                        calendar=None, train_len=None):
        """Single-step coefficients (a_t, g_t, F, b_t); 0-based t."""
        coeffs = self.coefficients(t + 1, calendar=calendar, train_len=train_len)
        if x_t is None:
            b_t = 0.0
        else:
            x_t = np.asarray(x_t, dtype=float)
            weights = np.zeros(x_t.shape[0]) if weights is None else np.asarray(weights)
            if x_t.shape != weights.shape:
                from .errors import DataError

                raise DataError(
                    f"feature vector length {x_t.shape[0]} does not match "
                    f"{weights.shape[0]} weights")
            b_t = float(weights @ x_t)
        g = coeffs.g(strengths)
        return coeffs.a[t], g[t], coeffs.F, b_t


def compose(components):
    """Stack components into a composite model."""
    return CompositeIssm(components)
