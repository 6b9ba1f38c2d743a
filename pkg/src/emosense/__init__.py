"""Emotion detection from wearable-style sensor streams.

Simulated GSR and pulse sensors feed a local pub/sub bus; a rules engine
routes readings through a rounding transform into a columnar object store;
a per-participant softmax classifier is trained on the stored data and
served behind a named endpoint; button-triggered inference sessions
classify {Angry, Happy, Sad} from windowed mean features and fan the
result out to notification sinks and a web UI.
"""

__version__ = "0.1.0"

LABELS = ("Angry", "Happy", "Sad")
