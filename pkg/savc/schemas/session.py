from pydantic import BaseModel, ConfigDict, Field, model_validator


class SessionSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    index: int = Field(ge=0)
    class_ids: tuple[int, ...] = Field(min_length=1)
    # None marks the unbounded base session.
    shots: int | None = Field(default=None, ge=1)
    ways: int = Field(ge=1)

    @model_validator(mode="after")
    def validate_session(self) -> "SessionSpec":
        if self.ways != len(self.class_ids):
            raise ValueError("ways must equal the number of class ids")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class ids must be unique within a session")
        if self.index == 0 and self.shots is not None:
            raise ValueError("the base session has unbounded shots")
        if self.index > 0 and self.shots is None:
            raise ValueError("incremental sessions must declare shots")
        return self

    @property
    def is_base(self) -> bool:
        return self.index == 0
