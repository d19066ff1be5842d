"""Step-by-step spectral reference used by the front-end tests.

Everything here is spelled out with per-frame loops, explicit index mirroring
and a naive DFT so the vectorized implementation can be checked against an
independently written construction of the same declared recipe.
"""

import numpy as np


def reference_mfcc(
    signal,
    sample_rate=8000,
    frame_length_s=0.025,
    frame_shift_s=0.010,
    num_filters=23,
    num_coeffs=23,
    preemphasis=0.97,
    energy_floor=1e-10,
):
    x = np.asarray(signal, dtype=np.float64)
    flen = int(round(sample_rate * frame_length_s))
    shift = int(round(sample_rate * frame_shift_s))
    fft_size = 1
    while fft_size < flen:
        fft_size *= 2

    # pre-emphasis, first sample kept as-is
    pre = np.empty_like(x)
    pre[0] = x[0]
    for n in range(1, x.shape[0]):
        pre[n] = x[n] - preemphasis * x[n - 1]

    num_frames = (x.shape[0] + shift // 2) // shift
    pad_left = flen // 2 - shift // 2

    def sample_at(i):
        # reflective mirroring without repeating the edge sample
        j = i - pad_left
        n = pre.shape[0]
        while j < 0 or j >= n:
            if j < 0:
                j = -j
            else:
                j = 2 * (n - 1) - j
        return pre[j]

    window = np.array(
        [0.54 - 0.46 * np.cos(2.0 * np.pi * i / (flen - 1)) for i in range(flen)]
    )

    # mel filterbank from explicit triangle evaluation
    def mel(hz):
        return 2595.0 * np.log10(1.0 + hz / 700.0)

    def mel_inv(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    mel_edges = np.linspace(mel(0.0), mel(sample_rate / 2.0), num_filters + 2)
    hz_edges = [mel_inv(m) for m in mel_edges]
    num_bins = fft_size // 2 + 1
    bin_hz = [k * sample_rate / fft_size for k in range(num_bins)]

    fbank = np.zeros((num_filters, num_bins))
    for m in range(num_filters):
        lo, mid, hi = hz_edges[m], hz_edges[m + 1], hz_edges[m + 2]
        for k in range(num_bins):
            f = bin_hz[k]
            if lo <= f <= mid:
                w = (f - lo) / (mid - lo)
            elif mid < f <= hi:
                w = (hi - f) / (hi - mid)
            else:
                w = 0.0
            fbank[m, k] = max(0.0, w)

    idx = np.arange(flen)
    out = np.zeros((num_frames, num_coeffs))
    for t in range(num_frames):
        frame = np.array([sample_at(t * shift + i) for i in range(flen)]) * window
        # naive DFT of the zero-padded frame
        power = np.zeros(num_bins)
        for k in range(num_bins):
            angle = 2.0 * np.pi * k * idx / fft_size
            re = float(np.sum(frame * np.cos(angle)))
            im = float(-np.sum(frame * np.sin(angle)))
            power[k] = re * re + im * im
        log_e = np.array(
            [np.log(max(float(np.dot(fbank[m], power)), energy_floor)) for m in range(num_filters)]
        )
        # orthonormal DCT-II, coefficient by coefficient
        for k in range(num_coeffs):
            scale = np.sqrt(1.0 / num_filters) if k == 0 else np.sqrt(2.0 / num_filters)
            acc = 0.0
            for m in range(num_filters):
                acc += log_e[m] * np.cos(np.pi * k * (2 * m + 1) / (2 * num_filters))
            out[t, k] = scale * acc
    return out
