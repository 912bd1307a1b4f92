# Pydantic schemas for configs, datasets and reports
