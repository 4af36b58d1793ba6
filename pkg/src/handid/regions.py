"""Fixed hand-region partition shared by keypoints, templates and features."""

REGIONS = ("palm", "little", "ring", "middle", "index", "thumb")
FINGERS = ("little", "ring", "middle", "index")
KEYPOINT_COUNTS = {"palm": 9, "little": 7, "ring": 7, "middle": 7, "index": 7, "thumb": 5}
N_KEYPOINTS = sum(KEYPOINT_COUNTS.values())  # 42

# full-scale ROI sizes (H, W)
PALM_ROI = (128, 128)
FINGER_ROI = (128, 32)


def region_slices():
    """Row ranges of each region inside the 42-point array."""
    out, start = {}, 0
    for r in REGIONS:
        out[r] = slice(start, start + KEYPOINT_COUNTS[r])
        start += KEYPOINT_COUNTS[r]
    return out


REGION_SLICES = region_slices()


def check_region(region):
    if region not in KEYPOINT_COUNTS:
        raise ValueError(f"unknown region {region!r}; expected one of {', '.join(REGIONS)}")
    return region
