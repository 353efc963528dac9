//! Compiles every code block in the guide as a doctest, so the book cannot
//! drift from the library. Chapters live in `book/src` at the repo root.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        mod $name {}
    };
}

chapter!(introduction, "../../../book/src/introduction.md");
chapter!(ingest, "../../../book/src/ingest.md");
chapter!(labeling, "../../../book/src/labeling.md");
chapter!(annotation, "../../../book/src/annotation.md");
chapter!(features, "../../../book/src/features.md");
chapter!(model, "../../../book/src/model.md");
chapter!(evaluation, "../../../book/src/evaluation.md");
chapter!(early, "../../../book/src/early.md");
chapter!(explaining, "../../../book/src/explaining.md");
chapter!(cli, "../../../book/src/cli.md");
