"""Synthetic multi-study longitudinal cohort with ground-truth progression
and controllable domain shift.

Latent model: each patient draws independent factors u_clin and u_img; the
progression rate is their average (so clinical baselines and baseline
imaging each carry half the signal). Visit scores follow linear
trajectories base + slope*month plus Gaussian noise. Volumes are a smooth
ellipsoidal "brain" with an inner ellipsoid whose size shrinks with u_img
and with cumulative progression; the study's acquisition shift
(gain/smooth/offset) is applied voxelwise as the planted bias.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import ConfigError
from .fileio import write_visits_csv, write_vvol
from .longitudinal import Patient, Visit

ENDPOINT_SLOPES = {"cdrsb": 0.15, "mmse": -0.25, "adas_cog12": 0.3,
                   "faq": 0.2}
DEFAULT_NOISE = {"cdrsb": 0.3, "mmse": 0.8, "adas_cog12": 1.0, "faq": 0.5}
DEFAULT_MISSING = {"education": 0.05, "bmi": 0.1, "apoe4": 0.1,
                   "faq": 0.1, "cdrsb": 0.05, "mmse": 0.05,
                   "adas_cog12": 0.05}


@dataclass
class StudyParams:
    """Per-study acquisition and population shift."""

    gain: float = 1.0
    offset: float = 0.0
    smooth: float = 0.0          # gaussian width in voxels, 0 = identity
    diagnosis_mix: tuple = (0.2, 0.5, 0.3)   # CN, MCI, AD
    age_mean: float = 72.0
    age_sd: float = 6.0
    rate_mean: float = 0.5
    rate_sd: float = 0.3


@dataclass
class SimConfig:
    studies: dict = field(default_factory=lambda: {
        "A": StudyParams(), "B": StudyParams()})
    patients_per_study: int = 50
    schedule: tuple = (0.0, 6.0, 12.0, 18.0, 24.0)
    volume_dims: tuple = (32, 32, 32)
    atrophy_effect: float = 1.0
    noise_sigma: dict = field(default_factory=lambda: dict(DEFAULT_NOISE))
    missingness: dict = field(
        default_factory=lambda: dict(DEFAULT_MISSING))
    emit_volumes: bool = True
    intensity_jitter: float = 0.0   # per-volume random offset (scanner drift)
    gain_jitter: float = 0.0        # per-volume random gain (brightness drift)
    conserve_mean: bool = False     # calibrate volumes to a fixed mean intensity
    seed: int = 0

    def validate(self):
        if len(self.studies) < 2:
            raise ConfigError("need >= 2 studies")
        if 0.0 not in self.schedule:
            raise ConfigError("schedule must include month 0")
        for k, r in self.missingness.items():
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"missingness[{k}]={r} outside [0,1]")
        for name, sp in self.studies.items():
            if abs(sum(sp.diagnosis_mix) - 1.0) > 1e-9:
                raise ConfigError(
                    f"study {name}: diagnosis mix must sum to 1")
        return self


@dataclass
class GroundTruth:
    """Withheld from training: per-patient latents and true label slopes."""

    patients: dict = field(default_factory=dict)

    def add(self, pid, rate, u_clin, u_img, slopes):
        self.patients[pid] = {"rate": rate, "u_clin": u_clin,
                              "u_img": u_img, "slopes": slopes}

    def to_json(self):
        return json.dumps({"patients": self.patients}, sort_keys=True,
                          indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text)["patients"])


def _gauss_smooth(vol, width):
    """Separable gaussian smoothing along the three spatial axes."""
    if width <= 0:
        return vol
    half = max(1, int(np.ceil(3 * width)))
    xs = np.arange(-half, half + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (xs / width) ** 2)
    kern /= kern.sum()
    out = vol.astype(np.float64)
    for axis in (1, 2, 3):
        out = np.apply_along_axis(
            lambda m: np.convolve(np.pad(m, half, mode="edge"), kern,
                                  mode="valid"), axis, out)
    return out


def apply_acquisition_shift(volume, study_params):
    """v <- gain * smooth(v, width) + offset, clipped to [0, inf)."""
    sp = study_params
    out = sp.gain * _gauss_smooth(volume, sp.smooth) + sp.offset
    return np.clip(out, 0.0, None)


def make_volume(dims, u_img, rate, month, atrophy_effect):
    """Smooth outer ellipsoid with an inner ellipsoid whose radius encodes
    baseline severity (u_img) and cumulative progression (rate*month)."""
    d, h, w = dims
    zz, yy, xx = np.meshgrid(np.linspace(-1, 1, d), np.linspace(-1, 1, h),
                             np.linspace(-1, 1, w), indexing="ij")
    r_out = np.sqrt((zz / 0.85) ** 2 + (yy / 0.75) ** 2 + (xx / 0.8) ** 2)
    brain = np.where(r_out <= 1.0, 0.8 * (1.0 - 0.4 * r_out ** 2), 0.0)
    sev = 0.5 * np.tanh(u_img) + 0.35 * rate * month / 12.0
    scale = float(np.clip(1.0 - 0.35 * atrophy_effect * sev, 0.35, 1.6))
    r_in = np.sqrt(((zz - 0.15) / (0.30 * scale)) ** 2
                   + (yy / (0.26 * scale)) ** 2
                   + ((xx + 0.1) / (0.28 * scale)) ** 2)
    vol = np.where(r_in <= 1.0, 0.35, brain)
    return vol[None]  # [1, D, H, W]


def _diagnosis(u_clin, mix):
    nd = NormalDist()
    if u_clin < nd.inv_cdf(min(max(mix[0], 1e-9), 1 - 1e-9)):
        return "CN"
    if u_clin < nd.inv_cdf(min(mix[0] + mix[1], 1 - 1e-9)):
        return "MCI"
    return "AD"


def _generate_patient(cfg, study, sp, index, out_dir):
    study_key = zlib.crc32(study.encode("utf-8"))
    rng = np.random.default_rng([cfg.seed, study_key, index])
    pid = f"{study}{index:04d}"
    u_clin, u_img = rng.normal(size=2)
    rate = float(np.clip(sp.rate_mean
                         + sp.rate_sd * (u_clin + u_img) / np.sqrt(2.0),
                         0.0, 1.5))
    slopes = {k: v * rate for k, v in ENDPOINT_SLOPES.items()}
    base = {
        "cdrsb": float(np.clip(1.5 + 0.6 * u_clin, 0.0, 8.0)),
        "mmse": float(np.clip(26.0 - 1.5 * u_clin, 21.0, 29.5)),
        "adas_cog12": float(np.clip(12.0 + 2.0 * u_clin, 2.0, 25.0)),
        "faq": float(np.clip(3.0 + 1.2 * u_clin, 0.0, 8.0)),
    }
    ranges = {"cdrsb": (0.0, 18.0), "mmse": (0.0, 30.0),
              "adas_cog12": (0.0, None), "faq": (0.0, None)}
    age = float(sp.age_mean + sp.age_sd * rng.normal() + 2.0 * rate)
    sex = "M" if rng.random() < 0.5 else "F"
    diagnosis = _diagnosis(u_clin, sp.diagnosis_mix)
    education = float(np.clip(14.0 + 3.0 * rng.normal(), 6.0, 22.0))
    bmi = float(np.clip(26.0 + 4.0 * rng.normal(), 15.0, 45.0))
    p_apoe = 1.0 / (1.0 + np.exp(-0.4 * (u_clin + u_img)))
    apoe4 = str(int(rng.binomial(2, p_apoe)))

    def drop(field_name):
        return rng.random() < cfg.missingness.get(field_name, 0.0)

    visits = []
    for month in cfg.schedule:
        scores = {}
        for name, slope in slopes.items():
            sigma = cfg.noise_sigma.get(name, 0.0)
            val = base[name] + slope * month + sigma * rng.normal()
            lo, hi = ranges[name]
            scores[name] = float(np.clip(val, lo, hi))
            # keep baseline endpoints observed so labels stay valid
            if month != 0.0 and drop(name):
                scores[name] = None
        vol = ref = None
        if cfg.emit_volumes:
            vol = make_volume(cfg.volume_dims, u_img, rate, month,
                              cfg.atrophy_effect)
            if cfg.conserve_mean:
                # calibrate every volume to the same mean intensity, so
                # progression shows only as a structural pattern (inner
                # ellipsoid size/contrast) and never as global brightness
                vol = vol * (0.2 / max(vol.mean(), 1e-9))
            if cfg.gain_jitter > 0.0:
                # per-volume brightness drift, identically distributed in
                # every study: scales the anatomy, so the within-study
                # spread it adds does not shrink when a model nulls its
                # sensitivity to constant offsets
                vol = vol * max(0.0, 1.0 + cfg.gain_jitter * rng.normal())
            vol = apply_acquisition_shift(vol, sp)
            if cfg.intensity_jitter > 0.0:
                # per-volume scanner drift, identically distributed in
                # every study, so it widens within-study intensity spread
                # without adding domain information
                vol = np.clip(
                    vol + cfg.intensity_jitter * abs(rng.normal()), 0.0,
                    None)
            ref = f"volumes/{pid}_m{int(month):03d}.vvol"
            if out_dir is not None:
                write_vvol(os.path.join(out_dir, ref),
                           vol.astype(np.float32))
                vol = None
        visits.append((Visit(
            patient_id=pid, study_id=study, month=float(month),
            age=age + month / 12.0, sex=sex, diagnosis=diagnosis,
            education=None if drop("education") else education,
            bmi=None if drop("bmi") else bmi,
            apoe4=None if drop("apoe4") else apoe4,
            cdrsb=scores["cdrsb"], mmse=scores["mmse"],
            adas_cog12=scores["adas_cog12"], faq=scores["faq"],
            volume_ref=ref), vol))
    gt = (pid, rate, float(u_clin), float(u_img),
          {k: float(v) for k, v in slopes.items()})
    return visits, gt


def generate_cohort(cfg, out_dir=None):
    """Generate the cohort; with `out_dir` set, stream visits.csv, VVOL1
    volumes and groundtruth.json to disk (volumes are then not kept in
    memory). Returns (patients, volumes, GroundTruth) where `volumes`
    maps volume_ref -> array (empty in file mode)."""
    cfg.validate()
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "volumes"), exist_ok=True)
    truth = GroundTruth()
    all_visits = []
    volumes = {}
    patients = []
    for study in sorted(cfg.studies):
        sp = cfg.studies[study]
        for i in range(cfg.patients_per_study):
            visits, gt = _generate_patient(cfg, study, sp, i, out_dir)
            truth.add(*gt)
            vs = [v for v, _ in visits]
            patients.append(Patient.build(vs))
            all_visits.extend(vs)
            if out_dir is None and cfg.emit_volumes:
                for v, vol in visits:
                    volumes[v.volume_ref] = vol
    if out_dir is not None:
        write_visits_csv(os.path.join(out_dir, "visits.csv"), all_visits)
        with open(os.path.join(out_dir, "groundtruth.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(truth.to_json())
    return patients, volumes, truth


# ---------------------------------------------------------------------------
# presets


def preset(name):
    """`default`: both signals planted, mild mixed shift, held-out study C.
    `acq-shift`: identical populations, distinct scanners (the planted
    bias), third study with an unseen shift for out-study testing.
    `pop-shift`: one scanner, shifted diagnosis mixes and age/rate
    distributions."""
    if name == "default":
        studies = {
            "A": StudyParams(),
            "B": StudyParams(gain=1.05, offset=0.1, smooth=0.5),
            "C": StudyParams(gain=0.95, offset=0.05,
                             diagnosis_mix=(0.25, 0.5, 0.25)),
        }
        return SimConfig(studies=studies)
    if name == "acq-shift":
        pop = dict(diagnosis_mix=(0.2, 0.5, 0.3), age_mean=72.0,
                   age_sd=6.0, rate_mean=0.5, rate_sd=0.3)
        # the planted bias is a pure mean-intensity offset: separable by a
        # threshold classifier, yet exactly removable by the feature
        # extractor (zero-DC first-layer filters), so adversarial training
        # has a reachable fixed point. Gain or smoothing shifts plant cues
        # a network cannot null exactly, which makes the unlearning
        # benchmark unwinnable.
        studies = {
            "A": StudyParams(gain=1.0, offset=0.0, smooth=0.0, **pop),
            "B": StudyParams(gain=1.0, offset=0.4, smooth=0.0, **pop),
            "C": StudyParams(gain=1.0, offset=1.0, smooth=0.0, **pop),
        }
        return SimConfig(studies=studies, gain_jitter=0.3,
                         conserve_mean=True)
    if name == "pop-shift":
        studies = {
            "A": StudyParams(diagnosis_mix=(0.45, 0.45, 0.1),
                             age_mean=68.0, rate_mean=0.35),
            "B": StudyParams(diagnosis_mix=(0.1, 0.45, 0.45),
                             age_mean=75.0, rate_mean=0.65),
            "C": StudyParams(diagnosis_mix=(0.2, 0.5, 0.3),
                             age_mean=72.0, rate_mean=0.5),
        }
        return SimConfig(studies=studies)
    raise ConfigError(
        f"unknown preset {name!r}; choose from default, acq-shift, "
        f"pop-shift")
