#!/usr/bin/env python3
"""Regenerates the JSON fixtures in this directory (deterministic)."""
import json
import math
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
PF_TAN = math.tan(math.acos(0.95))


def bus(i, root=False):
    b = {"id": f"n{i}", "phases": ["a"], "vmin_pu": 0.95, "vmax_pu": 1.05}
    if root:
        b["is_root"] = True
    return b


def branch(bid, f, t, r, x, smax):
    return {"id": bid, "from": f, "to": t, "phases": ["a"], "r_pu": [[r]], "x_pu": [[x]], "smax_mva": smax}


def rnd(xs):
    return [round(float(v), 6) for v in xs]


def write(name, obj):
    (HERE / name).write_text(json.dumps(obj, indent=2) + "\n")


def two_bus():
    return {
        "name": "2bus",
        "base_mva": 1.0,
        "horizon": {"steps": 2, "dt_hours": 1.0},
        "buses": [bus(0, True), bus(1)],
        "branches": [branch("l01", "n0", "n1", 0.01, 0.02, 2.0)],
        "devices": [
            {"id": "dg1", "bus": "n0", "kind": "dg", "smax_mva": 1.2, "cost": [1.0], "reserve_cost": 0.1},
            {"id": "ld1", "bus": "n1", "kind": "load", "smax_mva": 1.0, "cost": [100.0, 100.0],
             "reserve_cost": 10.0, "curtail_max_frac": 0.5},
        ],
        "forecasts": {"ld1": {"p_mw": [0.5, 0.5], "q_mvar": [0.0, 0.0]}},
    }


def four_bus(name, steps, dt, pv_shape, load_shape, dg_caps, e0):
    network = {
        "buses": [bus(0, True), bus(1), bus(2), bus(3)],
        "branches": [
            branch("l01", "n0", "n1", 0.005, 0.01, 3.0),
            branch("l12", "n1", "n2", 0.008, 0.012, 3.0),
            branch("l13", "n1", "n3", 0.006, 0.01, 3.0),
        ],
    }
    devices = [
        {"id": "dg1", "bus": "n0", "kind": "dg", "smax_mva": dg_caps[0], "cost": [1.0], "reserve_cost": 0.2},
        {"id": "st1", "bus": "n0", "kind": "storage", "smax_mva": 0.6, "emin_mwh": 0.2, "emax_mwh": 2.0,
         "e0_mwh": e0, "pmax_mw": 0.5, "eta": 0.95, "cost": [0.01], "reserve_cost": 0.05},
        {"id": "pv1", "bus": "n1", "kind": "pv", "smax_mva": 1.0, "cost": [0.3], "reserve_cost": 0.1},
        {"id": "ld1", "bus": "n1", "kind": "load", "smax_mva": 1.0, "cost": [100.0, 100.0],
         "reserve_cost": 5.0, "curtail_max_frac": 0.5},
        {"id": "dg2", "bus": "n2", "kind": "dg", "smax_mva": dg_caps[1], "cost": [1.2], "reserve_cost": 0.25},
        {"id": "ld2", "bus": "n2", "kind": "load", "smax_mva": 1.0, "cost": [100.0, 100.0],
         "reserve_cost": 5.0, "curtail_max_frac": 0.5},
        {"id": "pv2", "bus": "n3", "kind": "pv", "smax_mva": 0.8, "cost": [0.3], "reserve_cost": 0.1},
        {"id": "ld3", "bus": "n3", "kind": "load", "smax_mva": 1.0, "cost": [100.0, 100.0],
         "reserve_cost": 5.0, "curtail_max_frac": 0.5},
    ]
    k = np.arange(steps)
    pv = pv_shape(k)
    ld = load_shape(k)
    forecasts = {}
    for dev, peak in (("pv1", 1.0), ("pv2", 0.8)):
        forecasts[dev] = {"p_mw": rnd(peak * pv), "q_mvar": [0.0] * steps}
    for dev, peak in (("ld1", 0.6), ("ld2", 0.5), ("ld3", 0.4)):
        p = peak * ld
        forecasts[dev] = {"p_mw": rnd(p), "q_mvar": rnd(p * PF_TAN)}
    return {"name": name, "base_mva": 1.0, "horizon": {"steps": steps, "dt_hours": dt}, **network,
            "devices": devices, "forecasts": forecasts}


def day_pv(k):
    return np.clip(np.sin(np.pi * (k - 12) / 26), 0, None) * ((k >= 12) & (k <= 38))


def day_load(k):
    f = 0.55 + 0.45 * np.exp(-(((k - 38) / 6.0) ** 2)) + 0.15 * np.exp(-(((k - 16) / 4.0) ** 2))
    return f / f.max()


def main():
    write("2bus.json", two_bus())
    write("4bus.json", four_bus("4bus", 48, 0.5, day_pv, day_load, (1.5, 1.0), 1.0))
    # Midday window: abundant solar, light load.
    write("4bus_hsll.json", four_bus(
        "4bus_hsll", 12, 0.5,
        lambda k: 0.9 + 0.1 * np.sin(np.pi * k / 11),
        lambda k: 0.55 + 0.0 * k,
        (1.5, 1.0), 1.0))
    # Morning window: solar ramps up under heavy load, small DG fleet, empty battery.
    write("4bus_lshl.json", four_bus(
        "4bus_lshl", 12, 0.5,
        lambda k: np.clip(k / 8.0, 0, 1) * 0.9,
        lambda k: 1.0 + 0.0 * k,
        (0.6, 0.4), 0.2))

    # Robust scenario: largest DG trips and a masked load rises during steps 20-40.
    write("robust_dg_trip.json", [
        {"target": "dg1", "channel": "capacity_scale", "lo": 0.0, "hi": 1.0, "steps": [20, 40]},
        {"target": "ld2", "channel": "load_forecast_add", "lo": 0.0, "hi": 0.3, "steps": [20, 40]},
    ])
    write("2bus_load_box.json", [
        {"target": "ld1", "channel": "load_forecast_add", "lo": -0.5, "hi": 1.0, "steps": [0, 1]},
    ])

    # Forecast-error model: pv error (surplus when positive) and load error (deficit when positive).
    write("gaussian_4bus.json", {
        "mean": [0.0, 0.0],
        "cov": [[0.01, 0.002], [0.002, 0.0064]],
        "labels": ["pv_total", "load_total"],
        "rows": [{"constraint": "balance", "A": [-1.0, 1.0]}],
    })

    # Historical load-error samples for the Wasserstein set (matched to the 'actual' distribution).
    rng = np.random.default_rng(20240611)
    std = 0.05
    hist = rng.normal(0.0, std, size=(500, 2))
    write("dro_samples.json", {"dims": 2, "labels": ["ld2", "ld3"], "samples": [rnd(r) for r in hist]})
    write("dro_spec.json", [
        {"target": "ld2", "channel": "load_forecast_add", "lo": -0.5, "hi": 0.5, "steps": [0, 47]},
        {"target": "ld3", "channel": "load_forecast_add", "lo": -0.5, "hi": 0.5, "steps": [0, 47]},
    ])
    # Unmatched: aggregate mean shifted by two aggregate standard deviations, split evenly.
    shift = 2.0 * math.sqrt(2.0) * std / 2.0
    for name, mean in (("events_dro_matched.json", 0.0), ("events_dro_shifted.json", round(shift, 6))):
        write(name, {
            "events": [
                {"id": f"err_{d}", "kind": "load_forecast_err", "locations": [d],
                 "distribution": {"family": "gaussian",
                                  "params": {"mean": mean, "std": std, "lo": -0.5, "hi": 0.5}}}
                for d in ("ld2", "ld3")
            ],
            "probability_matrix": [[1.0, 0.0], [0.0, 1.0]],
            "windows": [{"from": 0, "to": 47}],
        })

    # Full catalog covering all nine event kinds on the 4-bus case, with four 12-step windows.
    events = [
        ("dg_trip_1", "dg_trip", ["dg1", "dg2"], {"family": "two_point", "params": {"a": 0.0, "b": -1.0, "p_b": 0.1}}),
        ("pv_trip_1", "pv_trip", ["pv1", "pv2"], {"family": "two_point", "params": {"a": 0.0, "b": -1.0, "p_b": 0.1}}),
        ("dg_cyber_1", "dg_cyber", ["dg1", "dg2"], {"family": "uniform", "params": {"lo": -0.3, "hi": 0.0}}),
        ("pv_cyber_1", "pv_cyber", ["pv1", "pv2"], {"family": "uniform", "params": {"lo": -0.3, "hi": 0.3}}),
        ("load_cyber_1", "load_cyber", ["ld1", "ld2", "ld3"], {"family": "uniform", "params": {"lo": 0.0, "hi": 0.2}}),
        ("pv_err", "pv_forecast_err", ["pv1", "pv2"],
         {"family": "gaussian", "params": {"mean": 0.0, "std": 0.03}}),
        ("load_err", "load_forecast_err", ["ld1", "ld2", "ld3"],
         {"family": "gaussian_mixture", "params": {"weights": [0.8, 0.2], "means": [0.0, 0.04], "stds": [0.02, 0.03]}}),
        ("weather_pv", "weather_pv_loss", ["pv1", "pv2"],
         {"family": "exponential_tail", "params": {"scale": 0.2, "sign": -1.0, "cap": 1.0}}),
        ("weather_load", "weather_load_loss", ["ld1", "ld2", "ld3"],
         {"family": "exponential_tail", "params": {"scale": 0.3, "sign": -1.0, "cap": 1.0}}),
    ]
    locations = ["dg1", "dg2", "pv1", "pv2", "ld1", "ld2", "ld3"]

    def row(locs, p):
        return [p if loc in locs else 0.0 for loc in locations]

    def row_vals(locs, vals):
        return [vals[locs.index(loc)] if loc in locs else 0.0 for loc in locations]

    # Window 0 quiet, 1 cyber spike, 2 load-loss spike, 3 extreme conditions.
    base = [0.01, 0.01, 0.0, 0.0, 0.0, 0.2, 0.2, 0.0, 0.0]
    spikes = {1: {2: 0.5, 3: 0.5, 4: 0.5}, 2: {8: 0.5}, 3: {0: 0.6, 1: 0.6, 7: 0.7, 8: 0.7}}
    matrix = []
    for w in range(4):
        probs = list(base)
        for e, p in spikes.get(w, {}).items():
            probs[e] = p
        matrix.append([row(events[e][2], probs[e]) for e in range(len(events))])
    write("events_4bus.json", {
        "events": [{"id": i, "kind": k, "locations": l, "distribution": d} for i, k, l, d in events],
        "locations": locations,
        "probability_matrix": matrix,
        "windows": [{"from": 12 * w, "to": 12 * w + 11} for w in range(4)],
        # Worst-case shortfall per (event, location) in pu.
        "impacts": [
            row_vals(["dg1", "dg2"], [1.5, 1.0]),
            row_vals(["pv1", "pv2"], [1.0, 0.8]),
            row_vals(["dg1", "dg2"], [0.45, 0.3]),
            row_vals(["pv1", "pv2"], [0.3, 0.24]),
            row_vals(["ld1", "ld2", "ld3"], [0.12, 0.1, 0.08]),
            row_vals(["pv1", "pv2"], [0.09, 0.09]),
            row_vals(["ld1", "ld2", "ld3"], [0.05, 0.05, 0.05]),
            row_vals(["pv1", "pv2"], [0.5, 0.4]),
            row_vals(["ld1", "ld2", "ld3"], [0.6, 0.5, 0.4]),
        ],
    })


if __name__ == "__main__":
    main()
