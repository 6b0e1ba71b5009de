pub mod canio;
pub mod numerics;
pub mod traffic_sim;
pub mod util;
pub mod windowing;
pub mod model;
pub mod training;
pub mod detect;

#[cfg(doctest)]
mod book {
    macro_rules! chapters {
        ($($name:ident => $file:literal),* $(,)?) => {
            $(#[doc = include_str!(concat!("../../../book/src/", $file))] mod $name {})*
        };
    }
    chapters! {
        introduction => "introduction.md",
        data => "data.md",
        simulation => "simulation.md",
        windowing => "windowing.md",
        numerics => "numerics.md",
        model => "model.md",
        training => "training.md",
        detection => "detection.md",
        cli => "cli.md",
    }
}
