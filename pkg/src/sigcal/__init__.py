"""Signature-based asset price models: algebra, pricing and calibration."""

from .tensor_algebra import (
    TensorSeries,
    concat,
    half_shuffle,
    index_to_word,
    inner,
    iter_words,
    parse_word,
    qv_bracket,
    shuffle,
    tensor_exp,
    word_index,
    word_str,
)
from .signature import SamplePath, SigStream, batch_signatures, path_signature, sig_increment
from .expected_signature import (
    CorrelationSpec,
    conditional_expected_sig,
    expected_sig,
    expected_sig_word,
    q_series_expected_sig,
)
from .models import (
    ModelSpec,
    eval_model,
    model_sig_lift,
    model_variance,
    sabr_taylor_coefficients,
    tilde_basis,
    to_plain,
)
from .pricing import (
    FeatureMatrix,
    SigPayoff,
    bs_price,
    bs_vega,
    cv_price,
    fit_sig_payoff,
    implied_vol,
    mc_price,
    mc_price_gradient,
    precompute_features,
    sig_payoff_price,
    simulate_drivers,
)
from .market_sim import SVParams, estimate_spot_qv, extract_drivers, heston_call_price, simulate
from .calibration import (
    CalibOptions,
    CalibReport,
    QuoteSurface,
    atm_skew,
    calibrate_slicewise,
    calibrate_surface,
    fit_timeseries_price,
    fit_timeseries_vol,
    joint_calibrate,
)

__version__ = "0.1.0"
