"""abedash: attribute-gated selective encryption for tiled 360 DASH video.

The package has five building blocks:

* ``bitstream``  -- fragmented-MP4 (.m4s) segment parsing/rewriting and H.264
  NAL classification (I/P/B frames).
* ``abekit``     -- policy-gated key encapsulation: attribute keys, access
  trees with threshold gates, and an authenticated blob format.
* ``selenc``     -- the four selective-encryption schemes applied to segments,
  plus size/CPU overhead accounting and the filename suffix convention.
* ``viewport``   -- head-trace geometry on the equirectangular tile grid,
  major/minor tile selection, and the extended MPD manifest.
* ``simnet``     -- a deterministic fluid-flow CDN simulator contrasting HTTPS
  with HTTP+ABE delivery (cache CPU, hit rates, rebuffering).

``abedash.cli`` wires these into batch commands; see README.md.
"""

__version__ = "0.1.0"
