import json

import pytest

APPENDIX_SCHEMA = {
    "id": "people",
    "description": "This describes the dataset.",
    "features": [
        {"name": "Age", "kind": "numerical"},
        {"name": "Gender", "kind": "categorical", "categories": ["Male", "Female"]},
    ],
}


@pytest.fixture
def people_files(tmp_path):
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps(APPENDIX_SCHEMA))
    data = tmp_path / "data.csv"
    data.write_text("Age,Gender\n42,Male\n33,Female\n")
    return schema, data
