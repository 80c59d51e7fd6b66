"""Per-subject foreground fraction before and after the ROI crop on a phantom.

Shows how much of the class imbalance the 64x112 crop removes and that the
fitted window keeps every foreground pixel.
"""
import argparse
import json

from claustrum_seg.dataset import subject_from_volumes
from claustrum_seg.phantom import PhantomConfig, generate_subject, subject_id
from claustrum_seg.preprocess import fit_roi_window, imbalance_report, select_ci_slices


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--margin", type=int, default=4)
    args = p.parse_args(argv)

    cfg = PhantomConfig(n_subjects=args.subjects, seed=args.seed)
    subjects = [subject_from_volumes(subject_id(i), *generate_subject(cfg, i)) for i in range(args.subjects)]
    window = fit_roi_window([s.label for subj in subjects for s in select_ci_slices(subj.slices)], margin=args.margin)
    print(json.dumps({"window": window.to_dict()}))
    for subj in subjects:
        agg = imbalance_report(select_ci_slices(subj.slices), window).to_dict()["aggregate"]
        print(json.dumps({
            "subject": subj.subject_id,
            "fg_before_pct": round(100 * agg["fg_fraction_before"], 3),
            "fg_after_pct": round(100 * agg["fg_fraction_after"], 3),
            "foreground_kept": agg["ci_pixels_after"] / agg["ci_pixels_before"],
        }))


if __name__ == "__main__":
    main()
