#!/usr/bin/env python3
"""Regenerates the log-mel golden fixtures with an independent numpy reference.

Each fixture is <name>.wav (PCM16), <name>.f32 (little-endian float32,
row-major [n_mels, frames]) and <name>.txt (shape and config sidecar).
"""
import math
import pathlib
import struct
import wave

import numpy as np

HERE = pathlib.Path(__file__).resolve().parent
SR = 16000
N_MELS = 80
WIN = 400
HOP = 160
NFFT = 512
LOG_FLOOR = 1e-10
NORM_EPS = 1e-5


def hz_to_mel(hz):
    f_sp = 200.0 / 3.0
    if hz < 1000.0:
        return hz / f_sp
    return 1000.0 / f_sp + math.log(hz / 1000.0) / (math.log(6.4) / 27.0)


def mel_to_hz(mel):
    f_sp = 200.0 / 3.0
    if mel < 1000.0 / f_sp:
        return mel * f_sp
    return 1000.0 * math.exp(math.log(6.4) / 27.0 * (mel - 1000.0 / f_sp))


def filterbank():
    lo, hi = hz_to_mel(0.0), hz_to_mel(SR / 2)
    edges = np.array([mel_to_hz(m) for m in np.linspace(lo, hi, N_MELS + 2)])
    freqs = np.arange(NFFT // 2 + 1) * SR / NFFT
    fb = np.zeros((N_MELS, NFFT // 2 + 1))
    for m in range(N_MELS):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - left) / (center - left)
        fall = (right - freqs) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rise, fall)) * 2.0 / (right - left)
    return fb


def log_mel(samples, normalize):
    frames = 1 + (len(samples) - WIN) // HOP
    window = np.hanning(WIN)
    stack = np.stack([samples[f * HOP:f * HOP + WIN] * window for f in range(frames)])
    power = np.abs(np.fft.rfft(stack, n=NFFT, axis=1)) ** 2
    feats = np.log(filterbank() @ power.T + LOG_FLOOR)
    if normalize:
        mean = feats.mean(axis=1, keepdims=True)
        std = feats.std(axis=1, keepdims=True)
        feats = (feats - mean) / (std + NORM_EPS)
    return feats


def write_wav(path, channels):
    pcm = np.clip(np.round(np.stack(channels, axis=1) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(len(channels))
        w.setsampwidth(2)
        w.setframerate(SR)
        w.writeframes(pcm.tobytes())
    return pcm.astype(np.float64) / 32768.0


def fixture(name, channels, normalize):
    pcm = write_wav(HERE / f"{name}.wav", channels)
    mono = pcm.mean(axis=1)
    feats = log_mel(mono, normalize)
    (HERE / f"{name}.f32").write_bytes(feats.astype("<f4").tobytes())
    (HERE / f"{name}.txt").write_text(
        f"wav {name}.wav\n"
        f"shape {feats.shape[0]} {feats.shape[1]}\n"
        f"normalize {'per_feature' if normalize else 'none'}\n"
        f"sample_rate {SR}\nn_mels {N_MELS}\nwin_ms 25\nhop_ms 10\nfft_size {NFFT}\nlog_floor {LOG_FLOOR}\n"
    )


def main():
    rng = np.random.default_rng(20240611)
    t = np.arange(int(0.3 * SR)) / SR
    chirp = 0.6 * np.sin(2 * np.pi * (300 * t + 0.5 * 9000 * t * t)) + 0.02 * rng.standard_normal(t.size)
    fixture("chirp", [chirp], normalize=True)

    t = np.arange(int(0.25 * SR)) / SR
    left = 0.4 * np.sin(2 * np.pi * 440 * t) + 0.05 * rng.standard_normal(t.size)
    right = 0.3 * np.sin(2 * np.pi * 2500 * t) + 0.05 * rng.standard_normal(t.size)
    fixture("stereo_tones", [left, right], normalize=False)


if __name__ == "__main__":
    main()
