"""Unified checkpoint format for PSR parameters, the feature pipeline and the
reactive policy.

A checkpoint is a numpy ``.npz`` archive. The entry ``header`` holds a UTF-8
JSON document with the format version, all dimensions, scalar settings and
free-form metadata. Every other entry is a float64 array stored row-major:

    psr/q0, psr/W_ext_xi, psr/W_ext_o, psr/W_pred
    policy/W1, policy/b1, policy/W2, policy/b2, policy/r
    policy/in_shift, policy/in_scale                (if standardized)
    pipeline/<map>/frequencies, pipeline/<map>/offsets,
    pipeline/<map>/basis, pipeline/<map>/mean      (RFF + PCA maps)
    pipeline/action_low, pipeline/action_high      (if bounded)

Arrays are written byte-for-byte, so loading reproduces them exactly.
"""

import json

import numpy as np

from .features import ConstantMap, FeatureMap, FeaturePipeline, IndicatorMap, PCAProjection, RFFMap
from .policy import INPUT_KEYS, POLICY_KEYS, PolicyParams
from .psr import PSR_KEYS, PSRParams

FORMAT_VERSION = 1
MAPS = ("obs", "act", "future_obs", "future_act", "history")


def _encode_map(name, fmap, arrays):
    if isinstance(fmap, FeatureMap):
        pre = f"pipeline/{name}/"
        arrays[pre + "frequencies"] = fmap.rff.frequencies
        arrays[pre + "offsets"] = fmap.rff.offsets
        arrays[pre + "basis"] = fmap.pca.basis
        arrays[pre + "mean"] = fmap.pca.mean
        return {"type": "rff_pca", "bandwidth": fmap.rff.bandwidth, "bias": fmap.bias}
    if isinstance(fmap, ConstantMap):
        return {"type": "constant"}
    if isinstance(fmap, IndicatorMap):
        return {"type": "indicator", "n": fmap.n}
    raise TypeError(f"cannot serialize feature map of type {type(fmap).__name__}")


def _decode_map(name, spec, f):
    if spec["type"] == "rff_pca":
        pre = f"pipeline/{name}/"
        rff = RFFMap(f[pre + "frequencies"], f[pre + "offsets"], spec["bandwidth"])
        return FeatureMap(rff, PCAProjection(f[pre + "basis"], f[pre + "mean"]), spec["bias"])
    if spec["type"] == "constant":
        return ConstantMap()
    if spec["type"] == "indicator":
        return IndicatorMap(spec["n"])
    raise ValueError(f"unknown feature map type {spec['type']!r}")


def save_checkpoint(path, psr=None, policy=None, meta=None):
    header = {"format": FORMAT_VERSION, "meta": meta or {}}
    arrays = {}
    if psr is not None:
        header["psr"] = {"d_o": psr.d_o, "d_a": psr.d_a, "d_fo": psr.d_fo, "d_fa": psr.d_fa,
                         "lam": psr.lam, "cap": psr.cap}
        for k in PSR_KEYS:
            arrays["psr/" + k] = getattr(psr, k)
        pl = psr.pipeline
        if pl is not None:
            header["pipeline"] = {
                "k": pl.k, "w_h": pl.w_h, "obs_dim": pl.obs_dim, "act_dim": pl.act_dim,
                "bounded": pl.action_low is not None,
                "maps": {m: _encode_map(m, getattr(pl, m), arrays) for m in MAPS},
            }
            if pl.action_low is not None:
                arrays["pipeline/action_low"] = pl.action_low
                arrays["pipeline/action_high"] = pl.action_high
    if policy is not None:
        header["policy"] = {"in_dim": policy.in_dim, "act_dim": policy.act_dim, "hidden": policy.W1.shape[0]}
        for k in POLICY_KEYS + INPUT_KEYS:
            if getattr(policy, k) is not None:
                arrays["policy/" + k] = getattr(policy, k)
    encoded = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, header=encoded, **{k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()})
    return path


def load_checkpoint(path):
    """Returns (psr or None, policy or None, meta)."""
    with np.load(path) as f:
        header = json.loads(bytes(f["header"]).decode("utf-8"))
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header.get('format')}")
        psr = policy = None
        if "psr" in header:
            pipeline = None
            if "pipeline" in header:
                ph = header["pipeline"]
                maps = {m: _decode_map(m, ph["maps"][m], f) for m in MAPS}
                pipeline = FeaturePipeline(
                    k=ph["k"], w_h=ph["w_h"], obs_dim=ph["obs_dim"], act_dim=ph["act_dim"],
                    action_low=f["pipeline/action_low"] if ph["bounded"] else None,
                    action_high=f["pipeline/action_high"] if ph["bounded"] else None, **maps)
            h = header["psr"]
            psr = PSRParams(**{k: f["psr/" + k] for k in PSR_KEYS}, d_o=h["d_o"], d_a=h["d_a"],
                            lam=h["lam"], cap=h["cap"], pipeline=pipeline)
        if "policy" in header:
            policy = PolicyParams(**{k: f["policy/" + k] for k in POLICY_KEYS + INPUT_KEYS if "policy/" + k in f})
    return psr, policy, header["meta"]
