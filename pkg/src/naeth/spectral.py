"""Symmetry-resolved diagonalization into total-spin multiplets.

For each total spin s the Hamiltonian is diagonalized on the
highest-weight subspace (the intersection of the S_z = s magnetization
sector with ker S_+), and every multiplet is completed by repeated
application of the normalized lowering operator. Built this way the
multiplet structure, and with it the Wigner-Eckart factorization of
matrix elements, holds to eigensolver precision by construction; no
m-mixing from degenerate eigensolver rotations can occur.

Also provides the (E, S)-resolved multiplet-density entropy surface, the
degeneracy audit used to gate infinite-time averages, and a versioned
binary cache for spectra.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh, svd

from .errors import SolverError, ValidationError
from .model import SpinOperators, max_abs
from .spin_algebra import HalfInteger

__all__ = [
    "SpinMultiplet",
    "SpectrumTable",
    "EntropySurface",
    "DegeneracyReport",
    "decompose",
    "entropy_surface",
    "degeneracy_report",
    "save_spectrum",
    "load_spectrum",
    "table_digest",
]

_NULLSPACE_TOL = 1e-10
_CACHE_MAGIC = b"NAETHSP\x00"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class SpinMultiplet:
    """One energy eigenmultiplet: E, s, and the 2s+1 vectors |a, m>.

    ``vectors[i]`` is the eigenvector with m = -s + i, so the last row is
    the highest-weight state.
    """

    label: int
    energy: float
    twice_spin: int
    vectors: np.ndarray = field(repr=False)

    @property
    def spin(self) -> HalfInteger:
        return HalfInteger(self.twice_spin)

    @property
    def degeneracy(self) -> int:
        return self.twice_spin + 1

    def twice_m_values(self) -> range:
        return range(-self.twice_spin, self.twice_spin + 1, 2)

    def vector(self, twice_m: int) -> np.ndarray:
        idx = (twice_m + self.twice_spin) // 2
        if not 0 <= idx < self.degeneracy:
            raise ValidationError(
                f"m={twice_m}/2 outside multiplet with s={self.twice_spin}/2"
            )
        return self.vectors[idx]


@dataclass(frozen=True)
class SpectrumTable:
    """All multiplets of one model, sorted by (spin, energy)."""

    n_sites: int
    model_hash: str
    multiplets: tuple[SpinMultiplet, ...]

    @property
    def dimension(self) -> int:
        return 2 ** self.n_sites

    def total_states(self) -> int:
        return sum(m.degeneracy for m in self.multiplets)

    def energies(self) -> np.ndarray:
        return np.array([m.energy for m in self.multiplets])

    def twice_spins(self) -> np.ndarray:
        return np.array([m.twice_spin for m in self.multiplets], dtype=int)

    def by_spin(self) -> dict[int, list[SpinMultiplet]]:
        out: dict[int, list[SpinMultiplet]] = {}
        for m in self.multiplets:
            out.setdefault(m.twice_spin, []).append(m)
        return out

    def flat_levels(self):
        """Arrays (E, twice_m, multiplet_index) over all (alpha, m) states."""
        es, tms, idx = [], [], []
        for i, mult in enumerate(self.multiplets):
            for tm in mult.twice_m_values():
                es.append(mult.energy)
                tms.append(tm)
                idx.append(i)
        return np.array(es), np.array(tms, dtype=int), np.array(idx, dtype=int)


def _magnetization_sectors(n_sites: int) -> dict[int, np.ndarray]:
    """Basis indices of each twice-magnetization sector.

    Kron ordering puts site 0 in the most significant bit, with local
    basis (up, down), so a set bit marks a down spin.
    """
    dim = 2 ** n_sites
    popcounts = np.array([bin(b).count("1") for b in range(dim)])
    twice_m = n_sites - 2 * popcounts
    return {tm: np.flatnonzero(twice_m == tm) for tm in range(-n_sites, n_sites + 1, 2)}


def decompose(
    ham: sp.spmatrix,
    ops: SpinOperators,
    model_hash: str = "",
    *,
    threads: int = 1,
) -> SpectrumTable:
    """Simultaneous eigenbasis of {H, S^2, S_z} organized into multiplets."""
    from .model import verify_symmetry  # deferred to avoid cycle at import

    n = ops.n_sites
    if ham.shape != (2 ** n, 2 ** n):
        raise ValidationError("Hamiltonian dimension does not match operators")
    report = verify_symmetry(ham, ops)
    if not report.passed:
        raise ValidationError(f"refusing to decompose a non-symmetric H: {report}")

    sectors = _magnetization_sectors(n)
    ham = sp.csr_matrix(ham)
    splus = ops.sp.tocsc()

    def solve_sector(ts: int):
        """Highest-weight diagonalization in the S_z = s sector."""
        ix = sectors[ts]
        if ts == n:
            basis = np.eye(len(ix))
        else:
            above = sectors[ts + 2]
            block = splus[np.ix_(above, ix)].toarray()
            _, sing, vt = svd(block, full_matrices=True)
            rank = int(np.sum(sing > _NULLSPACE_TOL))
            basis = vt[rank:].T
        if basis.shape[1] == 0:
            return ts, None, None
        h_sector = ham[np.ix_(ix, ix)].toarray()
        h_hw = basis.T @ h_sector @ basis
        h_hw = 0.5 * (h_hw + h_hw.T)
        try:
            energies, coeffs = eigh(h_hw)
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise SolverError(f"eigensolver failed in sector s={ts}/2") from exc
        return ts, energies, basis @ coeffs

    spins = [ts for ts in range(n % 2, n + 1, 2)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            solved = list(pool.map(solve_sector, spins))
    else:
        solved = [solve_sector(ts) for ts in spins]

    dim = 2 ** n
    sminus = ops.sm.tocsr()
    multiplets = []
    for ts, energies, hw_vectors in sorted(solved):
        if energies is None:
            continue
        ix = sectors[ts]
        for col in range(len(energies)):
            top = np.zeros(dim)
            top[ix] = hw_vectors[:, col]
            top /= np.linalg.norm(top)
            current = top
            rows = [top]
            tm = ts
            while tm > -ts:
                lowered = sminus @ current
                norm_sq = (ts * (ts + 2) - tm * (tm - 2)) / 4.0
                current = lowered / np.sqrt(norm_sq)
                current /= np.linalg.norm(current)
                rows.append(current)
                tm -= 2
            vectors = np.array(rows[::-1])  # index 0 -> m = -s
            multiplets.append((ts, float(energies[col]), vectors))

    multiplets.sort(key=lambda t: (t[0], t[1]))
    table = SpectrumTable(
        n_sites=n,
        model_hash=model_hash,
        multiplets=tuple(
            SpinMultiplet(i, e, ts, v) for i, (ts, e, v) in enumerate(multiplets)
        ),
    )
    if table.total_states() != dim:
        raise SolverError(
            f"multiplet dimensions sum to {table.total_states()}, expected {dim}"
        )
    return table


@dataclass(frozen=True)
class EntropySurface:
    """log(multiplet density) over (energy, spin) bins.

    S_th(bin) = log(count / dE); empty bins are undefined (lookup returns
    None).
    """

    e_origin: float
    de: float
    ds: float
    counts: dict[tuple[int, int], int]
    n_multiplets: int

    def bin_of(self, energy: float, spin_value: float) -> tuple[int, int]:
        return (int(np.floor((energy - self.e_origin) / self.de)),
                int(np.floor(spin_value / self.ds)))

    def log_density(self, energy: float, spin_value: float):
        count = self.counts.get(self.bin_of(energy, spin_value))
        if count is None:
            return None
        return np.log(count / self.de)

    def occupied_bins(self):
        """Iterate (energy_center, spin_center, S_th, count)."""
        for (ie, isb), count in sorted(self.counts.items()):
            yield (
                self.e_origin + (ie + 0.5) * self.de,
                (isb + 0.5) * self.ds,
                np.log(count / self.de),
                count,
            )

    def integrated_count(self) -> float:
        """sum over bins of exp(S_th) * dE; equals the multiplet count."""
        return sum(np.exp(s) * self.de for _, _, s, _ in self.occupied_bins())


def entropy_surface(table: SpectrumTable, de: float, ds: float = 1.0) -> EntropySurface:
    if de <= 0 or ds <= 0:
        raise ValidationError("bin widths must be positive")
    if not table.multiplets:
        raise ValidationError("empty spectrum table")
    e0 = min(m.energy for m in table.multiplets)
    counts: dict[tuple[int, int], int] = {}
    for m in table.multiplets:
        ie = int(np.floor((m.energy - e0) / de))
        isb = int(np.floor((m.twice_spin / 2.0) / ds))
        counts[(ie, isb)] = counts.get((ie, isb), 0) + 1
    return EntropySurface(e0, de, ds, counts, len(table.multiplets))


@dataclass(frozen=True)
class DegeneracyReport:
    """Audit of forced (within-multiplet) and accidental degeneracies."""

    tol: float
    forced: tuple[tuple[int, int], ...]  # (label, 2s+1) for s > 0
    accidental_pairs: tuple[tuple[int, int], ...]
    equal_spin_hazards: tuple[tuple[int, int], ...]
    energy_groups: tuple[tuple[int, ...], ...]

    @property
    def has_hazards(self) -> bool:
        return bool(self.equal_spin_hazards)


def degeneracy_report(table: SpectrumTable, tol: float) -> DegeneracyReport:
    if tol <= 0:
        raise ValidationError("degeneracy tolerance must be positive")
    forced = tuple(
        (m.label, m.degeneracy) for m in table.multiplets if m.twice_spin > 0
    )
    order = sorted(table.multiplets, key=lambda m: m.energy)
    groups: list[list[int]] = []
    current = [order[0].label] if order else []
    for prev, cur in zip(order, order[1:]):
        if abs(cur.energy - prev.energy) < tol:
            current.append(cur.label)
        else:
            groups.append(current)
            current = [cur.label]
    if current:
        groups.append(current)

    pairs = []
    hazards = []
    for group in groups:
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                pairs.append((a, b))
                if table.multiplets[a].twice_spin == table.multiplets[b].twice_spin:
                    hazards.append((a, b))
    return DegeneracyReport(
        tol,
        forced,
        tuple(pairs),
        tuple(hazards),
        tuple(tuple(g) for g in groups if len(g) > 1),
    )


def default_degeneracy_tol(ham) -> float:
    return 1e-10 * max(max_abs(ham), 1.0)


def table_digest(table: SpectrumTable) -> str:
    """Content digest over multiplet metadata and eigenvector payloads."""
    h = hashlib.sha256()
    h.update(struct.pack("<II", table.n_sites, len(table.multiplets)))
    for m in table.multiplets:
        h.update(struct.pack("<id", m.twice_spin, m.energy))
        h.update(np.ascontiguousarray(m.vectors, dtype="<f8").tobytes())
    return h.hexdigest()


def save_spectrum(table: SpectrumTable, path: str | Path) -> Path:
    """Write the versioned binary cache file (little-endian float64)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hash_bytes = table.model_hash.encode()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IIQH", _CACHE_VERSION, table.n_sites,
                             len(table.multiplets), len(hash_bytes)))
        fh.write(hash_bytes)
        for m in table.multiplets:
            fh.write(struct.pack("<id", m.twice_spin, m.energy))
            fh.write(np.ascontiguousarray(m.vectors, dtype="<f8").tobytes())
    return path


def load_spectrum(path: str | Path) -> SpectrumTable:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_CACHE_MAGIC))
        if magic != _CACHE_MAGIC:
            raise ValidationError(f"{path} is not a spectrum cache file")
        version, n_sites, n_multiplets, hash_len = struct.unpack("<IIQH", fh.read(18))
        if version != _CACHE_VERSION:
            raise ValidationError(
                f"unsupported spectrum cache version {version} in {path}"
            )
        model_hash = fh.read(hash_len).decode()
        dim = 2 ** n_sites
        multiplets = []
        for label in range(n_multiplets):
            twice_spin, energy = struct.unpack("<id", fh.read(12))
            count = (twice_spin + 1) * dim
            data = np.frombuffer(fh.read(count * 8), dtype="<f8")
            if data.size != count:
                raise ValidationError(f"truncated spectrum cache {path}")
            vectors = data.reshape(twice_spin + 1, dim).copy()
            multiplets.append(SpinMultiplet(label, energy, twice_spin, vectors))
    return SpectrumTable(n_sites, model_hash, tuple(multiplets))
