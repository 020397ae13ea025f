"""ctnarrate: patient-friendly narrated video reports from chest CT studies.

The pipeline turns a CT volume plus its written radiology report into a
storyboarded, narrated video: lay-language explanations, bounding-box
highlighted slices, a registered healthy-reference comparison, and a
rotating 3D organ rendering.
"""

__version__ = "0.1.0"
