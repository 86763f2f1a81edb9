use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use refocus_core::gateway::{serve_mock, MockModel, MockScript};

use super::read_mock_script;
use crate::args::MockServeArgs;

pub async fn run(args: MockServeArgs) -> Result<()> {
    let script = match &args.script {
        Some(p) => read_mock_script(p)?,
        None => MockScript::default(),
    };
    let mut model = MockModel::new(script);
    if args.latency_ms > 0 {
        model = model.with_latency(Duration::from_millis(args.latency_ms));
    }
    let (addr, server) = serve_mock(Arc::new(model), args.addr)
        .await
        .with_context(|| format!("binding {}", args.addr))?;
    println!("listening on http://{addr}/v1");
    std::io::stdout().flush()?;
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = server => {}
    }
    Ok(())
}
