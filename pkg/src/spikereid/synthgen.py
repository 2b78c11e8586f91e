"""Deterministic synthetic event-camera dataset.

Each identity is an articulated walking silhouette (head, torso, swinging
legs) with its own body proportions, gait frequency, limb phase, stride
amplitude, and optional surface texture. Sequences translate the figure
across the field of view; two cameras differ in horizontal mirroring,
luminance gain, and noise. Frames are converted to events with the DVS
simulator and written in the ``<root>/<id>/<cam>/<seq>.events`` layout next
to a manifest CSV.
"""

import os
from dataclasses import dataclass

import numpy as np

from .events import simulate_dvs
from .seeding import component_rng, derive_seed


@dataclass(frozen=True)
class IdentityParams:
    aspect: float          # torso half-width / half-height
    gait_freq: float       # gait cycles per frame
    phase: float           # limb phase offset, radians
    stride_amp: float      # leg swing amplitude, radians
    texture_seed: int      # < 0 disables body texture


@dataclass(frozen=True)
class CameraParams:
    cam_id: int
    mirror: bool
    gain: float
    noise: float


def default_cameras(noise=0.02):
    return (CameraParams(1, False, 1.0, noise), CameraParams(2, True, 1.35, noise))


def gen_identity_params(seed, n_ids):
    """Identity parameter tuples, deterministic in the seed.

    Gait frequency is an evenly spaced grid, so every pair of identities is
    well separated in dynamics. Body shape (aspect, stride) comes in near-
    pairs: consecutive identities look almost alike but walk at opposite ends
    of the frequency grid, which keeps static silhouette cues insufficient on
    their own."""
    if n_ids < 2:
        raise ValueError("need at least two identities")
    rng = component_rng(seed, "identities")
    freqs = np.linspace(0.022, 0.085, n_ids)[rng.permutation(n_ids)]
    half = n_ids // 2
    n_pairs = (n_ids + 1) // 2
    base_aspect = np.linspace(0.38, 0.54, n_pairs)
    base_stride = np.linspace(0.40, 0.80, n_pairs)
    aspects = np.empty(n_ids)
    strides = np.empty(n_ids)
    # frequency rank r pairs with rank r + half, so shape-alike identities sit
    # half the frequency grid apart
    for r, ident in enumerate(np.argsort(freqs)):
        pair = r % half if half else 0
        mate = 1 if r >= half else 0
        aspects[ident] = base_aspect[pair % n_pairs] + 0.015 * mate
        strides[ident] = base_stride[pair % n_pairs] + 0.030 * mate
    phases = np.linspace(0.0, 2.0 * np.pi * (n_ids - 1) / n_ids, n_ids)[rng.permutation(n_ids)]
    tex = rng.permutation(n_ids)
    return [IdentityParams(float(aspects[i]), float(freqs[i]), float(phases[i]),
                           float(strides[i]), int(tex[i])) for i in range(n_ids)]


def _texture_field(texture_seed, shape, amplitude=0.30):
    """Smooth multiplicative pattern in body-local coordinates."""
    rng = np.random.default_rng(int(texture_seed))
    coarse = rng.uniform(-1.0, 1.0, size=(6, 4))
    h, w = shape
    yy = np.linspace(0, coarse.shape[0] - 1, h)
    xx = np.linspace(0, coarse.shape[1] - 1, w)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, coarse.shape[0] - 1)
    x1 = np.minimum(x0 + 1, coarse.shape[1] - 1)
    fy = (yy - y0)[:, None]
    fx = (xx - x0)[None, :]
    field = (coarse[y0][:, x0] * (1 - fy) * (1 - fx) + coarse[y0][:, x1] * (1 - fy) * fx
             + coarse[y1][:, x0] * fy * (1 - fx) + coarse[y1][:, x1] * fy * fx)
    return 1.0 + amplitude * field


def _soft_mask(implicit, softness):
    """1 inside (implicit < 0), 0 outside, smooth over ~softness."""
    return 1.0 / (1.0 + np.exp(np.clip(implicit / softness, -30, 30)))


def _segment_dist(py, px, ay, ax, by, bx):
    vy, vx = by - ay, bx - ax
    denom = vy * vy + vx * vx
    tt = np.clip(((py - ay) * vy + (px - ax) * vx) / max(denom, 1e-9), 0.0, 1.0)
    return np.hypot(py - (ay + tt * vy), px - (ax + tt * vx))


def render_sequence(identity, camera, n_frames, seed, height=48, width=24,
                    background=0.30, body_lum=1.0):
    """Luminance frames (n_frames, height, width) of one walking sequence."""
    if n_frames < 2:
        raise ValueError("need at least two frames")
    rng = component_rng(seed, "sequence")
    # sequence-level nuisances: apparent body scale (distance to camera),
    # walking speed, and gait phase at sequence start; identity must be
    # recoverable despite them
    scale = rng.uniform(0.86, 1.14)
    start_phase = rng.uniform(0.0, 2.0 * np.pi)
    speed_jitter = rng.uniform(0.9, 1.1)
    torso_hh = height * 0.19 * scale
    torso_hw = torso_hh * identity.aspect
    head_r = height * 0.065 * scale
    leg_len = height * 0.26 * scale
    leg_hw = max(width * 0.045 * scale, 0.9)
    yc = height * 0.42
    margin = torso_hw + 2.0
    direction = 1 if rng.random() < 0.5 else -1
    x_start = margin + rng.uniform(0.0, 2.0)
    x_end = width - margin - rng.uniform(0.0, 2.0)
    if direction < 0:
        x_start, x_end = x_end, x_start

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    if identity.texture_seed >= 0:
        texture = _texture_field(identity.texture_seed, (height, width), amplitude=0.18)
    else:
        texture = np.ones((height, width))

    frames = np.empty((n_frames, height, width))
    soft = 0.8
    for f in range(n_frames):
        u = f / max(n_frames - 1, 1)
        xc = x_start + (x_end - x_start) * u * speed_jitter
        gait = 2.0 * np.pi * identity.gait_freq * f + identity.phase + start_phase
        bob = 0.8 * identity.stride_amp * np.sin(2.0 * gait)
        cy = yc + bob

        torso = ((ys - cy) / torso_hh) ** 2 + ((xs - xc) / torso_hw) ** 2 - 1.0
        cover = _soft_mask(torso * torso_hh, soft)
        head_cy = cy - torso_hh - head_r * 0.8
        head = np.hypot(ys - head_cy, xs - xc) - head_r
        cover = np.maximum(cover, _soft_mask(head, soft))
        hip_y = cy + torso_hh * 0.85
        swing = identity.stride_amp * np.sin(gait)
        for sgn in (1.0, -1.0):
            ang = sgn * swing
            foot_y = hip_y + leg_len * np.cos(ang)
            foot_x = xc + leg_len * np.sin(ang)
            dist = _segment_dist(ys, xs, hip_y, xc, foot_y, foot_x)
            cover = np.maximum(cover, _soft_mask(dist - leg_hw, soft))

        lum = background + (body_lum * texture - background) * cover
        frames[f] = lum

    if camera.mirror:
        frames = frames[:, :, ::-1].copy()
    frames *= camera.gain
    if camera.noise > 0:
        frames = frames + rng.normal(0.0, camera.noise, size=frames.shape)
    return np.maximum(frames, 0.01)


def write_events_file(path, stream):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# t_us,x,y,p\n")
        pol = (stream.p > 0).astype(int)
        for i in range(len(stream)):
            fh.write(f"{stream.t[i]},{stream.x[i]},{stream.y[i]},{pol[i]}\n")


def make_dataset(root, n_ids=8, seqs_per_id_per_cam=6, n_frames=64, seed=0,
                 frame_dt_us=33333, threshold=0.35, height=48, width=24,
                 noise=0.02, cameras=None):
    """Render, convert, and write the full dataset; returns the manifest path."""
    identities = gen_identity_params(seed, n_ids)
    cameras = cameras or default_cameras(noise)
    rows = []
    for i, identity in enumerate(identities):
        for cam in cameras:
            for s in range(seqs_per_id_per_cam):
                seq_seed = derive_seed(seed, "seq", i, cam.cam_id, s)
                frames = render_sequence(identity, cam, n_frames, seq_seed,
                                         height=height, width=width)
                stream = simulate_dvs(frames, threshold, frame_dt_us)
                rel = os.path.join(f"{i:03d}", str(cam.cam_id), f"{s:03d}.events")
                write_events_file(os.path.join(root, rel), stream)
                rows.append((i, cam.cam_id, s, rel, len(stream)))
    manifest = os.path.join(root, "manifest.csv")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write(f"# master_seed={seed}\n")
        fh.write("id,cam,seq,path,n_events\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    return manifest
