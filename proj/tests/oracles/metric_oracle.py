"""Reference values for the metric and colour tests.

Independent numpy / scikit-image implementations. Writes the fixture PNGs
into tests/data and prints the values that the C++ tests hard-code.

    python3 tests/oracles/metric_oracle.py
"""

import math
import pathlib

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import color
from skimage.metrics import structural_similarity

DATA = pathlib.Path(__file__).resolve().parent.parent / "data"


def fixtures():
    rng = np.random.default_rng(20240611)
    out = {}

    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    scene = np.stack([0.2 + 0.6 * xx, 0.5 + 0.3 * yy, 0.8 - 0.5 * xx * yy], axis=-1)
    disc = (yy - 0.4) ** 2 + (xx - 0.6) ** 2 < 0.05
    scene[disc] = [0.9, 0.3, 0.1]
    out["scene"] = scene

    half = np.zeros((16, 16, 3))
    half[:, :8] = [0.8, 0.2, 0.2]
    half[:, 8:] = [0.1, 0.4, 0.7]
    out["halves"] = half

    y, x = np.mgrid[0:16, 0:16]
    out["pattern"] = np.stack([(x * 16 + y * 7) % 256, (y * 13 + 40) % 256, (x * y * 3 + 9) % 256],
                              axis=-1) / 255.0

    haze = np.empty((32, 32, 3))
    haze[..., 0] = 0.05 + 0.1 * rng.random((32, 32))
    haze[..., 1] = 0.35 + 0.25 * rng.random((32, 32))
    haze[..., 2] = 0.5 + 0.3 * rng.random((32, 32))
    out["haze"] = haze

    y, x = np.mgrid[0:24, 0:24]
    check = ((x // 4 + y // 4) % 2).astype(float)
    out["checker"] = np.stack([0.2 + 0.6 * check, 0.1 + 0.8 * x / 23.0, 0.7 - 0.5 * check], axis=-1)

    q = {}
    for name, img in out.items():
        u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(u8, "RGB").save(DATA / f"{name}.png")
        q[name] = u8.astype(float) / 255.0
    return q


def uciqe(img):
    lab = color.rgb2lab(img)
    L = lab[..., 0].ravel() / 100.0
    chroma = np.sqrt(lab[..., 1] ** 2 + lab[..., 2] ** 2).ravel() / 100.0
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    sat = np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1), 0.0)
    n = L.size
    k = max(1, int(math.floor(0.01 * n + 0.5)))
    s = np.sort(L)
    con = s[-k:].mean() - s[:k].mean()
    return 0.4680 * chroma.std() + 0.2745 * con + 0.2576 * sat.mean()


def trimmed(v):
    v = np.sort(v)
    k = v.size
    lo = int(math.ceil(0.1 * k))
    hi = int(math.floor(0.1 * k))
    mu = v[lo:k - hi].mean()
    return mu, ((v - mu) ** 2).mean()


def uicm(img):
    r, g, b = (img[..., c].ravel() * 255.0 for c in range(3))
    mrg, vrg = trimmed(r - g)
    myb, vyb = trimmed(0.5 * (r + g) - b)
    return -0.0268 * math.hypot(mrg, myb) + 0.1586 * math.sqrt(vrg + vyb)


def eme(x, bs):
    k1, k2 = x.shape[1] // bs, x.shape[0] // bs
    acc = 0.0
    for i in range(k2):
        for j in range(k1):
            blk = x[i * bs:(i + 1) * bs, j * bs:(j + 1) * bs]
            mx, mn = blk.max(), blk.min()
            if mn > 0 and mx > 0:
                acc += math.log(mx / mn)
    return 2.0 / (k1 * k2) * acc


def uism(img, bs=8):
    total = 0.0
    for c, w in zip(range(3), (0.299, 0.587, 0.114)):
        ch = img[..., c] * 255.0
        gx = ndimage.sobel(ch, axis=1, mode="reflect")
        gy = ndimage.sobel(ch, axis=0, mode="reflect")
        total += w * eme(np.hypot(gx, gy) * ch, bs)
    return total


def uiconm(img, bs=8):
    k1, k2 = img.shape[1] // bs, img.shape[0] // bs
    acc = 0.0
    for i in range(k2):
        for j in range(k1):
            blk = img[i * bs:(i + 1) * bs, j * bs:(j + 1) * bs, :]
            mx, mn = blk.max(), blk.min()
            top, bot = mx - mn, mx + mn
            if top != 0 and bot != 0:
                acc += (top / bot) * math.log(top / bot)
    return -1.0 / (k1 * k2) * acc


def uiqm(img):
    return 0.0282 * uicm(img) + 0.2953 * uism(img) + 3.5753 * uiconm(img)


def ssim(a, b):
    return structural_similarity(a, b, channel_axis=-1, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, data_range=1.0)


def main():
    imgs = fixtures()
    print("// name, uiqm, uicm, uism, uiconm, uciqe")
    for name, img in imgs.items():
        print(f'{{"{name}", {uiqm(img):.12f}, {uicm(img):.12f}, {uism(img):.12f}, '
              f'{uiconm(img):.12f}, {uciqe(img):.12f}}},')

    gray = color.rgb2lab(np.full((1, 1, 3), 0.5))[0, 0]
    print(f"lab(0.5 gray) L = {gray[0]:.12f}")

    xyz = color.lab2xyz(np.array([[[50.0, 80.0, 0.0]]]))
    lin = xyz @ color.colorconv.rgb_from_xyz.T
    srgb = np.where(lin > 0.0031308, 1.055 * np.sign(lin) * np.abs(lin) ** (1 / 2.4) - 0.055,
                    12.92 * lin)
    print("lab(50,80,0) unclamped rgb =", ", ".join(f"{v:.12f}" for v in srgb.ravel()))

    sc = imgs["scene"]
    print(f"ssim(scene, 1-scene) = {ssim(sc, 1 - sc):.12f}")
    print(f"ssim(scene, scene+0.05) = {ssim(sc, np.clip(sc + 0.05, 0, 1)):.12f}")
    y, x = np.mgrid[0:16, 0:16]
    p = 0.5 + 0.4 * np.sin(x * 0.9) * np.cos(y * 0.7)
    pat = np.stack([p, p, p], axis=-1)
    anti = 1.0 - pat
    print(f"ssim(sinusoid, 1-sinusoid) = {ssim(pat, anti):.12f}")
    print(f"ssim(scene, haze) = {ssim(sc, imgs['haze']):.12f}")


if __name__ == "__main__":
    main()
