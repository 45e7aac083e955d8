"""Default clinical variable sets and window statistics."""

VITAL_SIGNS = ("HR", "O2Sat", "Temp", "SBP", "MAP", "DBP", "Resp")

LABORATORY_VALUES = (
    "BaseExcess",
    "HCO3",
    "FiO2",
    "pH",
    "PaCO2",
    "SaO2",
    "AST",
    "BUN",
    "Alkalinephos",
    "Calcium",
    "Chloride",
    "Creatinine",
    "Glucose",
    "Lactate",
    "Magnesium",
    "Phosphate",
    "Potassium",
    "Bilirubin_total",
    "Bilirubin_direct",
    "Hct",
    "Hgb",
    "PTT",
    "WBC",
    "Platelets",
)

DEMOGRAPHICS = ("Sex", "Age", "HospAdmTime", "ICULOS")

CLINICAL_INDICATORS = VITAL_SIGNS + LABORATORY_VALUES

WINDOW_STATISTICS = ("max", "min", "mean", "se", "latest")

LABEL_COLUMN = "label"
PATIENT_COLUMN = "patient_id"
TIME_COLUMN = "hours"
ONSET_COLUMN = "sepsis"
