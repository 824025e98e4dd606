//! IDX image/label ingestion: big-endian magic and dimensions, row-major
//! pixel bytes rescaled to [0, 1]. Tasks are formed by contiguous label
//! groups.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

use super::stream::{Dataset, TaskStream};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| Error::Idx {
        reason: format!("truncated header: {e}"),
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Parses an IDX image file: `(pixels in [0,1], count, rows, cols)`.
pub fn read_idx_images(mut reader: impl Read) -> Result<(Vec<f64>, usize, usize, usize)> {
    let magic = read_u32_be(&mut reader)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Idx {
            reason: format!("bad images magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"),
        });
    }
    let count = read_u32_be(&mut reader)? as usize;
    let rows = read_u32_be(&mut reader)? as usize;
    let cols = read_u32_be(&mut reader)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    reader.read_exact(&mut pixels).map_err(|e| Error::Idx {
        reason: format!("truncated pixel data: {e}"),
    })?;
    Ok((
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        count,
        rows,
        cols,
    ))
}

/// Parses an IDX label file.
pub fn read_idx_labels(mut reader: impl Read) -> Result<Vec<usize>> {
    let magic = read_u32_be(&mut reader)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Idx {
            reason: format!("bad labels magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"),
        });
    }
    let count = read_u32_be(&mut reader)? as usize;
    let mut labels = vec![0u8; count];
    reader.read_exact(&mut labels).map_err(|e| Error::Idx {
        reason: format!("truncated label data: {e}"),
    })?;
    Ok(labels.iter().map(|&l| l as usize).collect())
}

/// Loads a paired image/label IDX file set into a single-channel dataset.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::File::open(images_path)?;
    let labels = std::fs::File::open(labels_path)?;
    let (pixels, count, rows, cols) = read_idx_images(std::io::BufReader::new(images))?;
    let labels = read_idx_labels(std::io::BufReader::new(labels))?;
    if labels.len() != count {
        return Err(Error::Idx {
            reason: format!("{count} images but {} labels", labels.len()),
        });
    }
    let mut ds = Dataset::empty([1, rows, cols]);
    let sample_len = rows * cols;
    for (i, &label) in labels.iter().enumerate() {
        ds.push(&pixels[i * sample_len..(i + 1) * sample_len], label);
    }
    Ok(ds)
}

/// Splits labeled image data into a task stream: task `t` holds the classes
/// `[m*(t-1), m*t)`. Labels must cover `0..m*T` for some `T`.
pub fn stream_from_idx(
    train: &Dataset,
    test: &Dataset,
    classes_per_task: usize,
) -> Result<TaskStream> {
    let max_label = train
        .labels
        .iter()
        .chain(test.labels.iter())
        .max()
        .copied()
        .ok_or_else(|| Error::EmptySource {
            what: "idx dataset".to_string(),
        })?;
    let classes = max_label + 1;
    if classes % classes_per_task != 0 {
        return Err(Error::Idx {
            reason: format!("{classes} classes do not split into tasks of {classes_per_task}"),
        });
    }
    let tasks = classes / classes_per_task;
    let mut out_train = vec![Dataset::empty(train.sample_shape); tasks];
    let mut out_test = vec![Dataset::empty(test.sample_shape); tasks];
    for (src, dst) in [(train, &mut out_train), (test, &mut out_test)] {
        for i in 0..src.len() {
            let label = src.labels[i];
            dst[label / classes_per_task].push(src.sample(i), label);
        }
    }
    let stream = TaskStream {
        classes_per_task,
        train: out_train,
        test: out_test,
    };
    stream.validate()?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&(rows as u32).to_be_bytes());
        bytes.extend_from_slice(&(cols as u32).to_be_bytes());
        for img in images {
            bytes.extend_from_slice(img);
        }
        bytes
    }

    fn encode_labels(labels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        bytes
    }

    #[test]
    fn images_parse_and_rescale() {
        let images = vec![vec![0u8, 51, 102, 153], vec![204, 255, 0, 128]];
        let bytes = encode_images(&images, 2, 2);
        let (pixels, count, rows, cols) = read_idx_images(&bytes[..]).unwrap();
        assert_eq!((count, rows, cols), (2, 2, 2));
        assert_eq!(pixels[0], 0.0);
        assert_eq!(pixels[1], 51.0 / 255.0);
        assert_eq!(pixels[5], 1.0);
        assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_images(&[vec![0u8; 4]], 2, 2);
        bytes[3] = 0x01; // corrupt the magic
        assert!(matches!(read_idx_images(&bytes[..]), Err(Error::Idx { .. })));

        let labels = encode_images(&[vec![0u8; 4]], 2, 2); // wrong magic for labels
        assert!(read_idx_labels(&labels[..]).is_err());
    }

    #[test]
    fn truncated_data_is_rejected() {
        let mut bytes = encode_images(&[vec![7u8; 4], vec![9u8; 4]], 2, 2);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_idx_images(&bytes[..]), Err(Error::Idx { .. })));
    }

    #[test]
    fn contiguous_label_groups_become_tasks() {
        // Six images, labels 0..6, two per task with m = 2.
        let images: Vec<Vec<u8>> = (0..6).map(|i| vec![i as u8 * 40; 4]).collect();
        let labels: Vec<u8> = vec![0, 1, 2, 3, 4, 5];
        let images_bytes = encode_images(&images, 2, 2);
        let labels_bytes = encode_labels(&labels);

        let dir = std::env::temp_dir().join(format!("tbnorm-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img_path = dir.join("images-idx3-ubyte");
        let lbl_path = dir.join("labels-idx1-ubyte");
        std::fs::write(&img_path, &images_bytes).unwrap();
        std::fs::write(&lbl_path, &labels_bytes).unwrap();

        let ds = load_idx_dataset(&img_path, &lbl_path).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.sample_shape, [1, 2, 2]);

        let stream = stream_from_idx(&ds, &ds, 2).unwrap();
        assert_eq!(stream.tasks(), 3);
        assert_eq!(stream.train[1].labels, vec![2, 3]);
        assert_eq!(stream.test[2].labels, vec![4, 5]);

        std::fs::remove_dir_all(&dir).ok();
    }
}
