import sys
import os
import tempfile

# prepare sys.path for importing modules from parent directory
current = os.path.dirname(os.path.realpath(__file__))
parent = os.path.dirname(current)
sys.path.append(parent)

import unittest
import numpy as np
import imaging
import synthetic
from imaging import Mask, RasterImage


def checkerboard(height: int, width: int, tissue_rows: int) -> RasterImage:
    """
    White raster whose top `tissue_rows` rows are pink tissue
    """
    pixels = np.full((height, width, 3), 250, dtype=np.uint8)
    pixels[:tissue_rows] = (200, 120, 160)
    return RasterImage(pixels)


class TestTiling(unittest.TestCase):

    def test_detect_tissue_threshold(self):
        pixels = np.array([[[221, 221, 221], [220, 255, 255], [10, 20, 30]]], dtype=np.uint8)
        tissue = imaging.detect_tissue(RasterImage(pixels), white_threshold=220)
        np.testing.assert_array_equal(tissue.values, [[0.0, 1.0, 1.0]])

    def test_tile_order_and_partial_tiles(self):
        image = RasterImage(np.zeros((70, 100, 3), dtype=np.uint8))
        tissue = imaging.detect_tissue(image)
        patches = imaging.tile_image(image, tissue, patch_size=32, min_tissue_fraction=0.25)
        self.assertEqual([(p.origin_x, p.origin_y) for p in patches],
                         [(0, 0), (32, 0), (64, 0), (0, 32), (32, 32), (64, 32)])
        for patch in patches:
            self.assertEqual(patch.pixels.shape, (32, 32, 3))
            self.assertEqual(patch.tissue_fraction, 1.0)

    def test_tile_drops_background(self):
        image = checkerboard(64, 64, tissue_rows=8)
        patches = imaging.tile_image(image, imaging.detect_tissue(image), 32, 0.25)
        self.assertEqual([(p.origin_x, p.origin_y) for p in patches], [(0, 0), (32, 0)])
        self.assertEqual(patches[0].tissue_fraction, 0.25)
        self.assertEqual(imaging.tile_image(image, imaging.detect_tissue(image), 32, 0.3), [])

    def test_image_smaller_than_patch(self):
        image = RasterImage(np.zeros((16, 64, 3), dtype=np.uint8))
        with self.assertRaises(imaging.ImageSmallerThanPatchException):
            imaging.tile_image(image, imaging.detect_tissue(image), 32)

    def test_tissue_mask_shape_mismatch(self):
        image = RasterImage(np.zeros((64, 64, 3), dtype=np.uint8))
        with self.assertRaises(imaging.DimensionMismatchException):
            imaging.tile_image(image, Mask(np.ones((32, 64))), 32)


class TestDescriptor(unittest.TestCase):
    slide = synthetic.make_slide(seed=5, width=128, height=128, patch_size=32, tumor_share=0.5)

    def patches(self):
        return imaging.tile_image(self.slide, imaging.detect_tissue(self.slide), 32, 0.25)

    def test_layout(self):
        patch = self.patches()[0]
        descriptor = imaging.patch_descriptor(patch)
        self.assertEqual(descriptor.shape, (64,))
        for start in (0, 16, 32):
            self.assertAlmostEqual(descriptor[start:start + 16].sum(), 1.0, places=12)
        self.assertAlmostEqual(descriptor[54:62].sum(), 1.0, places=12)
        self.assertEqual(descriptor[62], patch.tissue_fraction)
        self.assertTrue(np.all(descriptor >= 0.0) and np.all(descriptor <= 1.0))

    def test_flat_patch(self):
        pixels = np.full((8, 8, 3), 100, dtype=np.uint8)
        descriptor = imaging.patch_descriptor(imaging.Patch(0, 0, 8, pixels, 1.0))
        self.assertEqual(descriptor[6], 1.0)  # 100 // 16 = bin 6 of the red histogram
        np.testing.assert_allclose(descriptor[48:51], 100 / 255)
        np.testing.assert_array_equal(descriptor[51:54], 0.0)
        self.assertEqual(descriptor[54], 1.0)
        self.assertEqual(descriptor[63], 0.0)

    def test_vertical_split_edge_density(self):
        pixels = np.zeros((8, 8, 3), dtype=np.uint8)
        pixels[:, 4:] = 255
        descriptor = imaging.patch_descriptor(imaging.Patch(0, 0, 8, pixels, 1.0))
        # one column of the eight crosses the edge
        self.assertEqual(descriptor[63], 1 / 8)

    def test_origin_does_not_matter(self):
        patch = self.patches()[0]
        moved = imaging.Patch(patch.origin_x + 96, patch.origin_y + 64, patch.size, patch.pixels, patch.tissue_fraction)
        np.testing.assert_array_equal(imaging.patch_descriptor(patch), imaging.patch_descriptor(moved))

    def test_deterministic_and_parallel_safe(self):
        patches = self.patches()
        serial = imaging.describe_patches(patches)
        parallel = imaging.describe_patches(list(reversed(patches)), workers=4)
        np.testing.assert_array_equal(serial, parallel)

    def test_unsupported_dim(self):
        with self.assertRaises(imaging.UnsupportedDimException):
            imaging.patch_descriptor(self.patches()[0], dim=32)


class TestSegmentation(unittest.TestCase):

    def test_dice_score(self):
        a = Mask(np.array([[1.0, 1.0, 0.0, 0.0]]))
        b = Mask(np.array([[1.0, 0.0, 0.0, 0.0]]))
        self.assertAlmostEqual(imaging.dice_score(a, b), 2 / 3)
        self.assertEqual(imaging.dice_score(a, a), 1.0)
        empty = Mask(np.zeros((2, 2)))
        self.assertEqual(imaging.dice_score(empty, empty), 1.0)
        self.assertEqual(imaging.mean_dice([(a, b), (a, a)]), (2 / 3 + 1) / 2)

    def test_dice_binarizes_at_half(self):
        a = Mask(np.array([[0.5, 0.49]]))
        b = Mask(np.array([[1.0, 0.0]]))
        self.assertEqual(imaging.dice_score(a, b), 1.0)

    def test_dice_shape_mismatch(self):
        with self.assertRaises(imaging.DimensionMismatchException):
            imaging.dice_score(Mask(np.zeros((2, 2))), Mask(np.zeros((2, 3))))

    def test_losses(self):
        truth = Mask(np.array([[1.0, 0.0]]))
        self.assertAlmostEqual(imaging.dice_loss(truth, truth), 0.0, places=12)
        self.assertAlmostEqual(imaging.bce_loss(truth, truth), -np.log(1 - 1e-7), places=12)
        half = Mask(np.full((1, 2), 0.5))
        self.assertAlmostEqual(imaging.bce_loss(half, truth), np.log(2.0), places=12)

    def test_multitask_loss(self):
        pred, truth = Mask(np.array([[0.8, 0.1]])), Mask(np.array([[1.0, 0.0]]))
        whole = imaging.dice_loss(pred, truth) + imaging.bce_loss(pred, truth)
        cls = imaging.bce_loss(0.7, 1.0)
        self.assertAlmostEqual(imaging.multitask_loss((pred, truth), (0.7, 1.0)), whole + cls)
        self.assertAlmostEqual(
            imaging.multitask_loss((pred, truth), (0.7, 1.0), (pred, truth), weights=(1.0, 2.0, 0.5)),
            whole + 2.0 * whole + 0.5 * cls
        )

    def test_tumor_area_and_slide_call(self):
        tissue = Mask(np.array([[1.0] * 10 + [0.0] * 10]))
        seg = Mask(np.array([[1.0] + [0.0] * 9 + [1.0] * 10]))
        fraction = imaging.tumor_area_fraction(seg, tissue)
        self.assertEqual(fraction, 0.1)
        self.assertTrue(imaging.slide_positive(fraction, 0.05))
        self.assertFalse(imaging.slide_positive(0.05, 0.05))
        self.assertTrue(imaging.slide_positive(0.050001, 0.05))
        with self.assertRaises(imaging.EmptyTissueMaskException):
            imaging.tumor_area_fraction(seg, Mask(np.zeros((1, 20))))


class TestFiles(unittest.TestCase):

    def test_image_and_mask_files(self):
        image = synthetic.make_slide(seed=1, width=40, height=24, patch_size=8, tumor_share=0.3)
        mask = Mask(np.array([[0.0, 1.0], [128 / 255, 1.0]]))
        with tempfile.TemporaryDirectory() as directory:
            image_path = os.path.join(directory, "slide.ppm")
            mask_path = os.path.join(directory, "mask.pgm")
            imaging.save_image(image, image_path)
            imaging.save_mask(mask, mask_path)
            with open(image_path, "rb") as f:
                self.assertEqual(f.read(2), b"P6")
            with open(mask_path, "rb") as f:
                self.assertEqual(f.read(2), b"P5")
            np.testing.assert_array_equal(imaging.load_image(image_path).pixels, image.pixels)
            np.testing.assert_allclose(imaging.load_mask(mask_path).values, mask.values)

    def test_features_file(self):
        rows = [("S2", 32, 0, np.arange(4) / 3.0), ("S1", 0, 32, np.ones(4)), ("S2", 0, 0, np.zeros(4))]
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "features.csv")
            imaging.write_features_csv(rows, path)
            slides = imaging.read_features_csv(path)
        self.assertEqual(list(slides), ["S1", "S2"])
        coords, features = slides["S2"]
        np.testing.assert_array_equal(coords, [[32, 0], [0, 0]])
        np.testing.assert_array_equal(features[0], np.arange(4) / 3.0)

    def test_features_file_bad_header(self):
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "features.csv")
            with open(path, "w", encoding="utf-8") as f:
                f.write("slide,patch_x,patch_y,f0\nS1,0,0,1.0\n")
            with self.assertRaises(imaging.FeatureFileException):
                imaging.read_features_csv(path)


if __name__ == "__main__":
    unittest.main()
