"""
Attacking a classifier through the autoencoder latent space
===========================================================

Loads the models produced by the pipeline (run ``cosa gen-data``,
``train-ae``, ``train-clf`` and ``build-dict`` first) and attacks a few
held-out clouds with

* the default objective, which pushes the cross-entropy up without limit,
* the margin objective, which stops pushing once the wrong class leads by kappa,
* sign-gradient PGD directly on the points, for reference.

Usage::

    python3 demos/attack_walkthrough.py build/runs/desk [iters]

Each latent attack takes a few seconds per input at 2000 iterations.
"""

import dataclasses
import sys
from pathlib import Path

from cosa.attack import AttackConfig, cosa_attack, pgd_baseline
from cosa.nn import load_autoencoder, load_model
from cosa.subspace import load_dictionaries
from cosa.synthdata import load_manifest

run = Path(sys.argv[1] if len(sys.argv) > 1 else "build/runs/desk")
iters = int(sys.argv[2]) if len(sys.argv) > 2 else 2000

# the pipeline stores every artefact as JSON next to the dataset
manifest = load_manifest(run / "data" / "manifest.json")
enc, dec = load_autoencoder(run / "models" / "ae.json")
clf = load_model(run / "models" / "clf_A.json", "classifier")
dicts = load_dictionaries(run / "models" / "dict.json")

default = AttackConfig(iters=iters)
margin = dataclasses.replace(default, misloss="margin", kappa=2.0)

# one held-out cloud from each of the first four classes
picked = {}
for cloud in manifest.load("test"):
    picked.setdefault(cloud.label, cloud)
clouds = [picked[y] for y in sorted(picked)[:4]]

print("label  objective  fooled  pre-clip l-inf  CD      HD")
for P in clouds:
    if int(clf.predict(P.points)) != P.label:
        continue  # only attack inputs the classifier gets right
    for name, cfg in (("neg_ce", default), ("margin", margin)):
        res = cosa_attack(P, P.label, clf, (enc, dec), dicts[P.label], cfg)
        print(f"{P.label:5d}  {name:9s}  {str(res.success):6s}  {res.pre_clip_linf:14.3f}"
              f"  {res.distortion.cd:.4f}  {res.distortion.hd:.3f}")
    res = pgd_baseline(P, P.label, clf, eps=default.eps, steps=50)
    print(f"{P.label:5d}  {'pgd':9s}  {str(res.success):6s}  {res.pre_clip_linf:14.3f}"
          f"  {res.distortion.cd:.4f}  {res.distortion.hd:.3f}")

# the pre-clip column shows how far the decoded cloud wandered before the
# final clip pulled it back into the eps box; when it is many times eps the
# clipped result keeps little of the adversarial direction
