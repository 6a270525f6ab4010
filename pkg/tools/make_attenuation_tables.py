"""Regenerate the bundled attenuation tables in src/xspod/data.

Values come from the Elam/Ravel/Sieber cross sections shipped with ``xraydb``
(photoelectric, incoherent and coherent mass coefficients).  ``xraydb`` is only
needed to rerun this script, not at runtime.

    pip install xraydb
    python tools/make_attenuation_tables.py
"""

from pathlib import Path

import numpy as np
import xraydb

OUT = Path(__file__).resolve().parents[1] / "src" / "xspod" / "data"

# name -> (mass fractions by element, density g/cm3)
MATERIALS = {
    "pmma": ({"C": 5, "O": 2, "H": 8}, 1.19),
    "aluminum": ({"Al": 1}, 2.699),
    "iron": ({"Fe": 1}, 7.874),
}

GRID_KEV = np.unique(np.round(np.geomspace(1.0, 1000.0, 121), 6))
KINDS = ("photo", "incoh", "coh")


def mass_fractions(atoms):
    weights = {el: n * xraydb.atomic_mass(el) for el, n in atoms.items()}
    total = sum(weights.values())
    return {el: w / total for el, w in weights.items()}


def mass_coefficients(fractions, energy_kev):
    ev = np.atleast_1d(energy_kev) * 1000.0
    return [sum(f * xraydb.mu_elam(el, ev, kind=k) for el, f in fractions.items()) for k in KINDS]


def edges_in_range(atoms):
    out = []
    for el in atoms:
        for edge in xraydb.xray_edges(el).values():
            if GRID_KEV[0] < edge.energy / 1000.0 < GRID_KEV[-1]:
                out.append(edge.energy / 1000.0)
    return sorted(out)


def build(name, atoms, density):
    fractions = mass_fractions(atoms)
    edges = edges_in_range(atoms)
    grid = sorted(set(GRID_KEV.tolist()) - {e for e in edges})
    rows = []
    for e in grid:
        pe, co, ra = (c[0] for c in mass_coefficients(fractions, e))
        rows.append((e, pe, co, ra))
    for e in edges:
        # duplicate-energy rows: left (below edge) then right (above edge)
        # the Elam tables place the jump up to ~0.5 eV above the nominal edge
        for offset_kev in (-1e-3, 1e-3):
            pe, co, ra = (c[0] for c in mass_coefficients(fractions, e + offset_kev))
            rows.append((e, pe, co, ra))
    rows.sort(key=lambda r: r[0])  # stable: left row stays first
    path = OUT / f"{name}.csv"
    with path.open("w") as fh:
        fh.write("energy_keV,pe_cm2_per_g,compton_cm2_per_g,rayleigh_cm2_per_g\n")
        for e, pe, co, ra in rows:
            fh.write(f"{e:.6g},{pe:.6e},{co:.6e},{ra:.6e}\n")
    (OUT / f"{name}.meta").write_text(f"{name},{density}\n")
    print(f"wrote {path} ({len(rows)} rows, edges at {edges} keV)")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, (atoms, density) in MATERIALS.items():
        build(name, atoms, density)
