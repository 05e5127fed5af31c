"""Adaptive testing with a frozen model: replay, prescriptions and a live HTTP session.

Run: python3 demos/adaptive_walkthrough.py
"""

import warnings

import numpy as np

from betacat.adaptive import Metric, prescribe, replay
from betacat.calibration import calibrate
from betacat.service import create_app
from betacat.simulation import TruthSpec, default_battery, generate_dataset, unit_meta

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient


def main():
    truth = default_battery(seed=2024)
    data, thetas = generate_dataset(TruthSpec(truth, 600, seed=3))
    fit = calibrate(data, meta=unit_meta(truth))
    saved = fit.to_saved(unit_meta(truth))
    accuracy = dict(zip(data.respondent_ids, thetas))

    # how fast does each selection rule recover theta? a dash means nobody has
    # finished a test yet, so every estimate is still the prior mean
    reports = {m: replay(fit, data, accuracy, m) for m in Metric}
    times = np.array([5.0, 10.0, 20.0, 30.0, 45.0, 60.0])
    print("replay |r(theta_hat, theta)| by elapsed minutes")
    print("  minutes  " + "  ".join(f"{t:>5.0f}" for t in times))
    for m, rep in reports.items():
        _, r = rep.time_curve(times)
        print(f"  {m.value:<16}" + "  ".join("    -" if np.isnan(v) else f"{abs(v):.3f}" for v in r))
    total = sum(it.median_minutes for it in fit.bank)
    print(f"  full battery takes {total:.0f} min; final |r| {abs(reports[Metric.INFO].final_r):.3f}")

    # fixed orderings for three proficiency levels under a 20 minute budget
    for theta in (-1.5, 0.0, 1.5):
        plan = prescribe(fit, theta, Metric.INFO_PER_MINUTE, time_budget=20.0)
        print(f"theta {theta:+.1f}: " + " -> ".join(p.test_id for p in plan)
              + f" ({plan[-1].cumulative_minutes:.0f} min)")

    # one respondent through the HTTP service until 15 minutes have passed
    client = TestClient(create_app(saved))
    row = dict(data.responses(0))
    session = client.post("/sessions", json={"metric": "info-per-minute"}).json()
    sid, nxt = session["session_id"], session["next_test"]
    print(f"live session for respondent {data.respondent_ids[0]} (true theta {thetas[0]:+.2f})")
    while nxt is not None:
        out = client.post(f"/sessions/{sid}/results", json={"test_id": nxt, "raw_score": row[nxt]}).json()
        print(f"  {nxt}: score {row[nxt]:.3f} -> theta {out['theta']:+.2f} (se {out['se']:.2f}) "
              f"at {out['cumulative_minutes']:.0f} min")
        nxt = out["next_test"]
        if out["cumulative_minutes"] >= 15:
            break


if __name__ == "__main__":
    main()
