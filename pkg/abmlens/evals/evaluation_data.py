import math

GOLDEN_MEAN_ENTROPY_RATE = 2.0 / 3.0
GOLDEN_MEAN_COMPLEXITY = math.log2(3.0) - 2.0 / 3.0
GOLDEN_MEAN_EXCESS_ENTROPY = GOLDEN_MEAN_COMPLEXITY - GOLDEN_MEAN_ENTROPY_RATE

FIXTURE_LENGTH = 20_000

EVALUATION_SAMPLES = [
    {
        "name": "fair_coin",
        "process": "fair_coin",
        "expected": {"n_states": 1, "h_mu": 1.0, "c_mu": 0.0, "excess_entropy_max": 0.05},
        "tolerance": 0.02,
    },
    {
        "name": "period_two",
        "process": "period_two",
        "expected": {"n_states": 2, "h_mu_max": 0.01, "c_mu": 1.0, "excess_entropy": 1.0},
        "tolerance": 0.01,
        "excess_entropy_tolerance": 0.05,
    },
    {
        "name": "golden_mean",
        "process": "golden_mean",
        "expected": {
            "n_states": 2,
            "h_mu": GOLDEN_MEAN_ENTROPY_RATE,
            "c_mu": GOLDEN_MEAN_COMPLEXITY,
            "transitions": [0.5, 0.5, 1.0],
        },
        "tolerance": 0.03,
    },
    {
        "name": "diffusion_gaussian_score",
        "expected": {"score_mae_max": 0.15, "gradient_error_max": 1e-4},
    },
    {
        "name": "diffusion_two_modes",
        "expected": {"min_mode_share": 0.2, "n_modes": 2},
    },
    {
        "name": "descriptor_oracles",
        "expected": {"effective_dim": 3.0, "effective_dim_tolerance": 0.2, "shift": 1.0, "shift_tolerance": 0.1},
    },
    {
        "name": "multiscale_period_two",
        "expected": {"c_mu_k1": 1.0, "c_mu_k2": 0.0},
        "tolerance": 0.01,
    },
    {
        "name": "regime_pipeline",
        "expected": {"min_boundaries": 1, "min_adjusted_rand": 0.9},
        "sweep": {"param": "caregiver_capacity", "start": 0.0, "stop": 15.0, "num": 16, "replicates": 3},
    },
]
