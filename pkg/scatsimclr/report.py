import io
import logging
from pathlib import Path

import fitz  # PyMuPDF
import numpy as np
from PIL import Image

from scatsimclr.filterbank import display_crop, to_gray, littlewood_paley_sum, spatial_filter

logger = logging.getLogger(__name__)


class FilterReport:
    """One-page PDF of a filter bank.

    The low-pass filter sits in the top-left cell; below it one row per scale,
    real parts on the left half and imaginary parts on the right half, one column
    per orientation.
    """

    def __init__(self, bank, cell=48, tile=None):
        self.bank = bank
        self.cell = cell
        self.tile = tile or min(bank.size, 2 ** (bank.J + 3))

    def _png(self, values, signed):
        image = Image.fromarray(display_crop(to_gray(values, signed), self.tile))
        buffer = io.BytesIO()
        image.save(buffer, format="PNG")
        return buffer.getvalue()

    def build(self, path):
        J, L = self.bank.J, self.bank.L
        margin, gap, label_height, row_label = 30, 4, 30, 40
        cell = self.cell
        half = L * (cell + gap)
        width = 2 * margin + row_label + 2 * half + 2 * gap
        grid_top = margin + label_height + 20
        height = grid_top + (J + 1) * (cell + gap) + 90

        doc = fitz.open()
        page = doc.new_page(width=width, height=height)
        self._add_label(page, f"Morlet filter bank  J={J}  L={L}  size={self.bank.size}",
                        margin, margin, width - 2 * margin)

        left = margin + row_label
        right = left + half + 2 * gap
        self._add_text(page, "real part", left, grid_top - 6, fontsize=10)
        self._add_text(page, "imaginary part", right, grid_top - 6, fontsize=10)

        phi = spatial_filter(self.bank.phi(0)).real
        self._add_cell(page, left, grid_top, self._png(phi, signed=False))
        self._add_text(page, "phi", margin, grid_top + cell / 2, fontsize=9)

        for j in range(J):
            y = grid_top + (j + 1) * (cell + gap)
            self._add_text(page, f"j={j}", margin, y + cell / 2, fontsize=9)
            for theta in range(L):
                psi = spatial_filter(self.bank.psi(j, theta))
                self._add_cell(page, left + theta * (cell + gap), y, self._png(psi.real, signed=True))
                self._add_cell(page, right + theta * (cell + gap), y, self._png(psi.imag, signed=True))

        lp = littlewood_paley_sum(self.bank)
        stats_y = grid_top + (J + 1) * (cell + gap) + 25
        self._add_text(page, f"Littlewood-Paley sum: min {lp.min():.4f}, max {lp.max():.4f}",
                       margin, stats_y, fontsize=10)
        self._add_text(page, f"band-pass scale factor: {self.bank.scale_factor:.6f}",
                       margin, stats_y + 16, fontsize=10)
        means = [abs(self.bank.psi(j, t)[0, 0]) for j in range(J) for t in range(L)]
        self._add_text(page, f"largest band-pass mean: {float(np.max(means)):.2e}",
                       margin, stats_y + 32, fontsize=10)

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc.save(str(path), garbage=4, deflate=True)
        doc.close()
        logger.info("wrote filter report %s", path)
        return path

    def _add_cell(self, page, x, y, png):
        rect = fitz.Rect(x, y, x + self.cell, y + self.cell)
        page.insert_image(rect, stream=png)
        page.draw_rect(rect, color=(0.7, 0.7, 0.7), width=0.5)

    def _add_label(self, page, text, x, y, width, bg_color=(0.95, 0.95, 0.95)):
        """Add a label box at the top of the page."""
        label_height = 30
        page.draw_rect(fitz.Rect(x, y, x + width, y + label_height), color=(0, 0, 0), fill=bg_color, width=1)
        self._add_text(page, text, x + 5, y + 20, fontsize=12)

    def _add_text(self, page, text, x, y, fontsize=12, color=(0, 0, 0)):
        page.insert_text((x, y), text, fontsize=fontsize, color=color)


def write_filter_report(bank, path):
    return FilterReport(bank).build(path)
