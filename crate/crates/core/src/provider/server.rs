use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;

use super::protocol::{handle_line, ImageCache};
use super::Backend;

/// Serves the line protocol on a reader/writer pair until end of input.
pub fn serve_stream<R: Read, W: Write>(backend: Arc<dyn Backend>, input: R, mut output: W) -> std::io::Result<()> {
    let mut cache = ImageCache::default();
    let reader = BufReader::new(input);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_line(&backend, &mut cache, &line);
        output.write_all(reply.as_bytes())?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection. Each connection
/// has its own image cache; the backend is shared.
pub fn serve_tcp(backend: Arc<dyn Backend>, listener: TcpListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(_) => continue,
        };
        let backend = Arc::clone(&backend);
        std::thread::spawn(move || {
            stream.set_nodelay(true).ok();
            let Ok(read_half) = stream.try_clone() else {
                return;
            };
            let _ = serve_stream(backend, read_half, stream);
        });
    }
    Ok(())
}
