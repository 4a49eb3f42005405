"""PNG reading and writing for images, masks and depth maps."""
import json

import numpy as np
from PIL import Image


def to_bytes(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_rgb_png(path, img):
    Image.fromarray(to_bytes(img), mode="RGB").save(path)


def read_rgb_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask_png(path, bits):
    Image.fromarray(np.where(np.asarray(bits, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def write_depth_png(path, depth, t_near, t_far):
    """16-bit depth normalised by (t_far - t_near); the scale goes to a sidecar JSON."""
    scale = float(t_far - t_near)
    norm = np.clip((np.asarray(depth, dtype=np.float64) - t_near) / scale, 0.0, 1.0)
    Image.fromarray(np.round(norm * 65535).astype(np.uint16)).save(path)
    sidecar = path[:-4] + ".json" if path.endswith(".png") else path + ".json"
    with open(sidecar, "w") as fh:
        json.dump({"t_near": float(t_near), "t_far": float(t_far), "scale": scale,
                   "max_value": 65535}, fh)


def read_depth_png(path):
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.float64)
    sidecar = path[:-4] + ".json"
    with open(sidecar) as fh:
        meta = json.load(fh)
    return meta["t_near"] + raw / meta["max_value"] * meta["scale"]
