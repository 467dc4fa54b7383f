"""Writes the golden fixtures used by test_volume and test_png.

Independent of the C++ encoders: VOL1 bytes via struct, PNG via zlib.
"""
import math
import struct
import zlib
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
D, H, W = 3, 4, 5
vox = (np.arange(D * H * W, dtype=np.float64) / (D * H * W - 1)).astype(np.float32)

vol = b"VOL1" + struct.pack("<QQQ", D, H, W) + vox.astype("<f4").tobytes()
(HERE / "ramp_3x4x5.vol").write_bytes(vol)

# Axial montage, every slice: 3 tiles on a 2-column grid, last cell black.
cols, rows = 2, 2
img = np.zeros((rows * H, cols * W), dtype=np.uint8)
grid = vox.reshape(D, H, W)
for k in range(D):
    oy, ox = (k // cols) * H, (k % cols) * W
    for y in range(H):
        for x in range(W):
            v = min(max(float(grid[k, y, x]), 0.0), 1.0) * 255.0
            img[oy + y, ox + x] = math.floor(v + 0.5)


def chunk(kind, data):
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data))


raw = b"".join(b"\x00" + img[y].tobytes() for y in range(img.shape[0]))
png = b"\x89PNG\r\n\x1a\n"
png += chunk(b"IHDR", struct.pack(">IIBBBBB", img.shape[1], img.shape[0], 8, 0, 0, 0, 0))
png += chunk(b"IDAT", zlib.compress(raw, 0))
png += chunk(b"IEND", b"")
(HERE / "ramp_axial_montage.png").write_bytes(png)
