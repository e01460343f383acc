"""SMILES parsing and folded Morgan (ECFP-style) fingerprints.

Only the parts of SMILES that matter for a 2-D molecular graph are kept:
organic-subset and bracket atoms, bonds ``- = # :``, branches, ring closures
(``0-9`` and ``%nn``) and dot-disconnected fragments.  Stereo marks
(``/ \\ @``) are accepted and dropped.  Aromaticity is taken as written.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, ParseError

log = logging.getLogger(__name__)

AROMATIC = 4  # bond order code for aromatic bonds

_SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr "
    "Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb "
    "Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr"
).split()
ATOMIC_NUMBER = {s: k + 1 for k, s in enumerate(_SYMBOLS)}

ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
BRACKET_AROMATIC = ("se", "as", "te", "b", "c", "n", "o", "p", "s")
VALENCE = {
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}
_BOND_SYMBOL = {"-": 1, "=": 2, "#": 3, ":": AROMATIC}


class SmilesError(ParseError):
    def __init__(self, message, offset, smiles=""):
        self.offset = offset
        self.smiles = smiles
        super().__init__(f"{message} at offset {offset}" + (f" in {smiles!r}" if smiles else ""))


@dataclass
class Atom:
    element: str
    charge: int = 0
    explicit_h: int = 0
    aromatic: bool = False
    in_ring: bool = False
    implicit_h: int = 0
    isotope: int = 0
    bracket: bool = False

    @property
    def total_h(self) -> int:
        return self.explicit_h + self.implicit_h

    @property
    def atomic_number(self) -> int:
        return ATOMIC_NUMBER[self.element]


@dataclass
class Molecule:
    atoms: list[Atom]
    bonds: list[tuple[int, int, int]]

    def neighbors(self) -> list[list[tuple[int, int]]]:
        """Per atom, the (bond index, neighbor atom) pairs."""
        out = [[] for _ in self.atoms]
        for k, (a, b, _) in enumerate(self.bonds):
            out[a].append((k, b))
            out[b].append((k, a))
        return out

    def degree(self, atom: int) -> int:
        return sum(1 for a, b, _ in self.bonds if a == atom or b == atom)


def _read_bracket(s: str, start: int):
    """Parse ``[...]`` starting at ``start``; returns (Atom, next offset)."""
    end = s.find("]", start)
    if end < 0:
        raise SmilesError("unterminated bracket atom", len(s), s)
    body = s[start + 1 : end]
    pos = 0

    def err(msg):
        return SmilesError(msg, start + 1 + pos, s)

    iso = ""
    while pos < len(body) and body[pos].isdigit():
        iso += body[pos]
        pos += 1
    aromatic = False
    symbol = None
    for cand in BRACKET_AROMATIC:
        if body.startswith(cand, pos):
            symbol, aromatic = cand.capitalize(), True
            break
    if symbol is None:
        if pos < len(body) and body[pos].isupper():
            two = body[pos : pos + 2]
            if len(two) == 2 and two[1].islower() and two in ATOMIC_NUMBER:
                symbol = two
            elif body[pos] in ATOMIC_NUMBER:
                symbol = body[pos]
        if symbol is None:
            raise err("unknown element")
    pos += len(symbol)
    if pos < len(body) and body[pos] == "@":
        while pos < len(body) and body[pos] == "@":
            pos += 1
        for tag in ("TH", "AL", "SP", "TB", "OH"):
            if body.startswith(tag, pos):
                pos += 2
                while pos < len(body) and body[pos].isdigit():
                    pos += 1
                break
    hcount = 0
    if pos < len(body) and body[pos] == "H":
        pos += 1
        hcount = 1
        if pos < len(body) and body[pos].isdigit():
            hcount = int(body[pos])
            pos += 1
    charge = 0
    if pos < len(body) and body[pos] in "+-":
        sign = 1 if body[pos] == "+" else -1
        pos += 1
        digits = ""
        while pos < len(body) and body[pos].isdigit():
            digits += body[pos]
            pos += 1
        if digits:
            charge = sign * int(digits)
        else:
            charge = sign
            while pos < len(body) and body[pos] == ("+" if sign > 0 else "-"):
                charge += sign
                pos += 1
    if pos < len(body) and body[pos] == ":":
        pos += 1
        if pos >= len(body) or not body[pos].isdigit():
            raise err("bad atom class")
        while pos < len(body) and body[pos].isdigit():
            pos += 1
    if pos != len(body):
        raise err(f"unexpected {body[pos]!r} in bracket atom")
    atom = Atom(symbol, charge=charge, explicit_h=hcount, aromatic=aromatic, isotope=int(iso or 0), bracket=True)
    return atom, end + 1


def parse_smiles(text: str) -> Molecule:
    """Parse SMILES into a :class:`Molecule` with implicit hydrogens and ring flags.

    Raises :class:`SmilesError` (carrying ``offset``) on unbalanced branches,
    unpaired ring digits, unknown elements or valence overflow.
    """
    s = text.strip()
    atoms: list[Atom] = []
    bonds: list[tuple[int, int, int]] = []
    bonded: set[tuple[int, int]] = set()
    atom_offset: list[int] = []
    prev = None
    pending = None  # (order or None for stereo single, offset)
    stack: list[int] = []
    rings: dict[int, tuple[int, object, int]] = {}
    i = 0
    n = len(s)

    def connect(a, b, sym, offset):
        if a == b:
            raise SmilesError("atom bonded to itself", offset, s)
        key = (min(a, b), max(a, b))
        if key in bonded:
            raise SmilesError("duplicate bond", offset, s)
        both_arom = atoms[a].aromatic and atoms[b].aromatic
        if sym is None:
            order = AROMATIC if both_arom else 1
        else:
            order = sym
        if order == AROMATIC and not both_arom:
            raise SmilesError("aromatic bond between non-aromatic atoms", offset, s)
        bonded.add(key)
        bonds.append((a, b, order))

    def add_atom(atom, offset):
        nonlocal prev, pending
        atoms.append(atom)
        atom_offset.append(offset)
        idx = len(atoms) - 1
        if prev is not None:
            connect(prev, idx, pending[0] if pending else None, offset)
        elif pending is not None:
            raise SmilesError("bond without a preceding atom", pending[1], s)
        pending = None
        prev = idx

    while i < n:
        ch = s[i]
        if ch == "(":
            if prev is None:
                raise SmilesError("branch without a preceding atom", i, s)
            if pending is not None:
                raise SmilesError("bond before branch", i, s)
            stack.append(prev)
            i += 1
        elif ch == ")":
            if not stack:
                raise SmilesError("unbalanced parenthesis", i, s)
            if pending is not None:
                raise SmilesError("dangling bond", i, s)
            prev = stack.pop()
            i += 1
        elif ch in _BOND_SYMBOL or ch in "/\\":
            if pending is not None:
                raise SmilesError("two consecutive bond symbols", i, s)
            pending = (_BOND_SYMBOL.get(ch, 1), i)
            i += 1
        elif ch == ".":
            if pending is not None or prev is None:
                raise SmilesError("misplaced '.'", i, s)
            prev = None
            i += 1
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise SmilesError("ring closure without a preceding atom", i, s)
            if ch == "%":
                digits = s[i + 1 : i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesError("'%' must be followed by two digits", i, s)
                num, width = int(digits), 3
            else:
                num, width = int(ch), 1
            sym = pending[0] if pending else None
            if num in rings:
                other, other_sym, _ = rings.pop(num)
                if sym is not None and other_sym is not None and sym != other_sym:
                    raise SmilesError("conflicting ring-closure bond symbols", i, s)
                connect(other, prev, sym if sym is not None else other_sym, i)
            else:
                rings[num] = (prev, sym, i)
            pending = None
            i += width
        elif ch == "[":
            atom, nxt = _read_bracket(s, i)
            add_atom(atom, i)
            i = nxt
        elif ch.isalpha():
            for sym in ORGANIC + AROMATIC_ORGANIC:
                if s.startswith(sym, i):
                    arom = sym.islower()
                    add_atom(Atom(sym.capitalize(), aromatic=arom), i)
                    i += len(sym)
                    break
            else:
                raise SmilesError(f"unknown element {ch!r}", i, s)
        else:
            raise SmilesError(f"unexpected character {ch!r}", i, s)

    if stack:
        raise SmilesError("unbalanced parenthesis", n, s)
    if pending is not None:
        raise SmilesError("dangling bond", n, s)
    if rings:
        num, (_, _, offset) = min(rings.items(), key=lambda kv: kv[1][2])
        raise SmilesError(f"unpaired ring closure {num}", offset, s)

    mol = Molecule(atoms, bonds)
    _assign_hydrogens(mol, atom_offset, s)
    _assign_rings(mol)
    return mol


def _assign_hydrogens(mol: Molecule, offsets: Sequence[int], s: str) -> None:
    total = [0] * len(mol.atoms)
    for a, b, order in mol.bonds:
        v = 1 if order == AROMATIC else order
        total[a] += v
        total[b] += v
    for k, atom in enumerate(mol.atoms):
        if atom.bracket:
            continue
        valences = VALENCE[atom.element]
        if atom.aromatic:
            # one extra unit for the atom's share of the pi system
            atom.implicit_h = max(0, valences[0] - (total[k] + 1))
            continue
        for v in valences:
            if v >= total[k]:
                atom.implicit_h = v - total[k]
                break
        else:
            raise SmilesError(f"valence overflow on {atom.element}", offsets[k], s)


def _assign_rings(mol: Molecule) -> None:
    """Flag atoms that sit on a cycle (incident to a non-bridge bond)."""
    nbrs = mol.neighbors()
    n = len(mol.atoms)
    disc = [-1] * n
    low = [0] * n
    bridges = set()
    clock = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = clock
        clock += 1
        stack = [(root, -1, iter(nbrs[root]))]
        while stack:
            node, via, it = stack[-1]
            advanced = False
            for bond, nxt in it:
                if bond == via:
                    continue
                if disc[nxt] < 0:
                    disc[nxt] = low[nxt] = clock
                    clock += 1
                    stack.append((nxt, bond, iter(nbrs[nxt])))
                    advanced = True
                    break
                low[node] = min(low[node], disc[nxt])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[node])
                if low[node] > disc[parent]:
                    bridges.add(via)
    for k, (a, b, _) in enumerate(mol.bonds):
        if k not in bridges:
            mol.atoms[a].in_ring = True
            mol.atoms[b].in_ring = True


# ---------------------------------------------------------------------------
# Morgan fingerprints

_MASK = (1 << 64) - 1
HASH_SEED = 0x5BD1E9955BD1E995


def _mix(x: int) -> int:
    # splitmix64 finalizer
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def stable_hash(values: Sequence[int]) -> int:
    """Seeded, platform-independent 64-bit hash of a sequence of integers."""
    h = HASH_SEED
    for v in values:
        h = _mix(h ^ (int(v) & _MASK))
    return _mix(h ^ len(values))


def atom_invariant(mol: Molecule, k: int, degree: int) -> int:
    a = mol.atoms[k]
    return stable_hash((a.atomic_number, degree, a.total_h, a.charge, int(a.in_ring), int(a.aromatic)))


@dataclass(frozen=True)
class Environment:
    radius: int
    atom: int
    identifier: int
    bonds: frozenset


def morgan_environments(mol: Molecule, radius: int = 2) -> list[Environment]:
    """Enumerate the identifiers that survive duplicate-substructure removal.

    An environment at radius ``r >= 1`` is dropped when its bond set equals
    one seen at a smaller radius, or one already kept at this radius (the
    smaller identifier wins).  Isolated atoms therefore contribute only
    their radius-0 identifier.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    nbrs = mol.neighbors()
    order = [b[2] for b in mol.bonds]
    ids = [atom_invariant(mol, k, len(nbrs[k])) for k in range(len(mol.atoms))]
    envs = [frozenset() for _ in mol.atoms]
    out = [Environment(0, k, ids[k], envs[k]) for k in range(len(mol.atoms))]
    seen = {frozenset()}
    for r in range(1, radius + 1):
        new_ids, new_envs = [], []
        for k in range(len(mol.atoms)):
            env = set(envs[k])
            for bond, nb in nbrs[k]:
                env.add(bond)
                env |= envs[nb]
            new_envs.append(frozenset(env))
            around = sorted((order[bond], ids[nb]) for bond, nb in nbrs[k])
            new_ids.append(stable_hash([r, ids[k]] + [x for pair in around for x in pair]))
        kept = set()
        for k in sorted(range(len(mol.atoms)), key=lambda k: new_ids[k]):
            env = new_envs[k]
            if env in seen or env in kept:
                continue
            kept.add(env)
            out.append(Environment(r, k, new_ids[k], env))
        seen |= set(new_envs)
        ids, envs = new_ids, new_envs
    return out


@dataclass(frozen=True)
class Fingerprint:
    bits: np.ndarray
    radius: int

    @property
    def width(self) -> int:
        return len(self.bits)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def hex(self) -> str:
        return np.packbits(self.bits).tobytes().hex()


def _check_width(width: int) -> None:
    if width <= 0 or width & (width - 1):
        raise ValueError(f"fingerprint width must be a power of two, got {width}")


def morgan_fingerprint(mol: Molecule, radius: int = 2, width: int = 2048) -> Fingerprint:
    _check_width(width)
    bits = np.zeros(width, dtype=np.uint8)
    for env in morgan_environments(mol, radius):
        bits[env.identifier & (width - 1)] = 1
    return Fingerprint(bits, radius)


def read_smiles_file(path) -> list[tuple[str, str]]:
    """``drug_id<TAB>smiles`` lines; a missing SMILES field is returned as ''."""
    path = Path(path)
    rows = []
    seen = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) > 2:
                raise ParseError(f"expected 'id<TAB>smiles', got {len(cols)} columns", line=lineno, path=path)
            drug = cols[0].strip()
            if drug in seen:
                raise DataError(f"{path}:{lineno}: duplicate drug id {drug!r}")
            seen.add(drug)
            rows.append((drug, cols[1].strip() if len(cols) == 2 else ""))
    return rows


def fingerprint_matrix(smiles_file, width: int = 2048, radius: int = 2, strict: bool = False):
    """Fingerprint every drug in a SMILES file.

    Returns ``(ids, matrix)`` with one 0/1 uint8 row per drug in file order.
    Missing or unparseable SMILES give a zero row and a warning, or abort in
    strict mode.
    """
    _check_width(width)
    rows = read_smiles_file(smiles_file)
    mat = np.zeros((len(rows), width), dtype=np.uint8)
    for k, (drug, smi) in enumerate(rows):
        if not smi:
            if strict:
                raise DataError(f"{smiles_file}: drug {drug!r} has no SMILES")
            log.warning("drug %s has no SMILES; using a zero fingerprint", drug)
            continue
        try:
            mat[k] = morgan_fingerprint(parse_smiles(smi), radius, width).bits
        except SmilesError as exc:
            if strict:
                raise DataError(f"{smiles_file}: drug {drug!r}: {exc}") from exc
            log.warning("drug %s: %s; using a zero fingerprint", drug, exc)
    return [d for d, _ in rows], mat


def write_fingerprint_csv(path, ids: Sequence[str], matrix: np.ndarray, packed: bool = False) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if packed:
            w.writerow(["drug_id", f"hex{matrix.shape[1]}"])
            for drug, row in zip(ids, matrix):
                w.writerow([drug, np.packbits(row.astype(np.uint8)).tobytes().hex()])
        else:
            w.writerow(["drug_id"] + [f"b{k}" for k in range(matrix.shape[1])])
            for drug, row in zip(ids, matrix):
                w.writerow([drug] + [str(int(v)) for v in row])


def read_fingerprint_csv(path):
    """Inverse of :func:`write_fingerprint_csv` for either layout."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return [], np.zeros((0, 0), dtype=np.uint8)
        ids, rows = [], []
        if len(header) == 2 and header[1].startswith("hex"):
            width = int(header[1][3:])
            for rec in reader:
                ids.append(rec[0])
                rows.append(np.unpackbits(np.frombuffer(bytes.fromhex(rec[1]), dtype=np.uint8))[:width])
        else:
            width = len(header) - 1
            for rec in reader:
                ids.append(rec[0])
                rows.append(np.array(rec[1:], dtype=np.uint8))
    mat = np.vstack(rows).astype(np.uint8) if rows else np.zeros((0, width), dtype=np.uint8)
    return ids, mat
