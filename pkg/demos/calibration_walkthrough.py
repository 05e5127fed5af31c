"""Simulate a battery, calibrate it and check what comes back.

Run: python3 demos/calibration_walkthrough.py
"""

from betacat.calibration import calibrate, posterior_predictive_check
from betacat.model import item_information
from betacat.scoring import batch_score, pearson_correlation
from betacat.simulation import TruthSpec, default_battery, generate_dataset, unit_meta


def main():
    truth = default_battery(seed=2024)
    data, thetas = generate_dataset(TruthSpec(truth, 1000, seed=7))
    print(f"simulated {data.shape[0]} respondents on {data.shape[1]} tests")

    fit = calibrate(data, meta=unit_meta(truth))
    diag = fit.diagnostics
    print(f"calibration: method={diag['method']} converged={diag['converged']} grad={diag['grad_norm']:.1e}")

    true, est = truth.arrays(), fit.bank.arrays()
    for k, name in enumerate(("alpha", "beta", "omega")):
        print(f"  r({name}) = {pearson_correlation(true[k], est[k]):.3f}")

    scores = batch_score(fit, data)
    print(f"r(theta_hat, theta) = {pearson_correlation(scores.thetas, thetas):.3f}")

    # which tests carry the most information per minute at the median respondent
    ranked = sorted(fit.bank, key=lambda it: -item_information(it, 0.0) / it.median_minutes)
    print("most efficient tests at theta = 0:")
    for it in ranked[:5]:
        info = item_information(it, 0.0)
        print(f"  {it.id}: info {info:.3f} in {it.median_minutes:.0f} min -> {info / it.median_minutes:.3f}/min")

    ppc = posterior_predictive_check(fit, data, n_reps=50)
    print("posterior predictive check, boundary rates (observed vs replicated mean):")
    for tid in list(ppc)[:4]:
        r = ppc[tid]
        obs = ", ".join(f"{v:.3f}" for v in r.observed_boundary)
        rep = ", ".join(f"{v:.3f}" for v in r.replicated_boundary.mean(axis=0))
        print(f"  {tid}: [{obs}] vs [{rep}], density envelope coverage {r.envelope_coverage():.2f}")

if __name__ == "__main__":
    main()
