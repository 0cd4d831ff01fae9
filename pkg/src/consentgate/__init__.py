"""consentgate: patient-consent authorization gateway for health records.

Every non-emergency access to a patient record by a non-usual provider
requires a real-time approval from the patient (or a nominee/delegate),
delivered over a multi-device notification channel.  Emergency access is
time-bounded and leaves a patient-visible trail.
"""

__version__ = "0.1.0"
